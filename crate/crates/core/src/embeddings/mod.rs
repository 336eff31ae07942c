//! Sub-word token representations and their concatenation.
//!
//! Four member kinds are available: a trainable character BiLSTM, frozen
//! hashed n-gram vectors, frozen contextual character-LM features, and the
//! min-pooled variant of the latter. An [`EmbeddingStack`] concatenates
//! member outputs in declaration order.

mod char;
mod charlm;
mod ngram;
mod pooled;
mod vocab;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use self::char::CharEmbedder;
pub use self::charlm::{pretrain_charlm, CharLm, CharLmConfig, CharLmEmbedder, DirectionReport, PretrainReport};
pub use self::ngram::{char_ngrams, fnv1a, NGramConfig, NGramEmbedder, UNK_BUCKET};
pub use self::pooled::PooledMemory;
pub use self::vocab::{CharVocab, UNK};

use crate::autodiff::{AutodiffError, Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::{Archive, CheckpointError};
use crate::exec::Execution;
use crate::ingest::Sentence;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("invalid embedding configuration: {0}")]
    Config(String),
    #[error("vector file line {line}: {message}")]
    VectorFile { line: usize, message: String },
    #[error("corpus of {chars} characters is smaller than one {window}-character training window")]
    CorpusTooSmall { chars: usize, window: usize },
    #[error("non-finite language-model loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("stack member {member} ({kind}) produced dimension {produced}, declared {declared}")]
    DimensionMismatch {
        member: usize,
        kind: &'static str,
        declared: usize,
        produced: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharSpec {
    pub char_dim: usize,
    pub hidden: usize,
}

impl Default for CharSpec {
    fn default() -> Self {
        Self {
            char_dim: 50,
            hidden: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NGramSpec {
    pub dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub buckets: usize,
    /// Offset added to the pipeline seed for this member's bucket table.
    pub seed_offset: u64,
    /// Optional text vector file (`count dim` header) for exact words.
    pub vectors: Option<PathBuf>,
}

impl Default for NGramSpec {
    fn default() -> Self {
        let c = NGramConfig::default();
        Self {
            dim: c.dim,
            n_min: c.n_min,
            n_max: c.n_max,
            buckets: c.buckets,
            seed_offset: 0,
            vectors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharLmSpec {
    /// Pretrained char-LM archive.
    pub model: Option<PathBuf>,
    /// Expected hidden size of each direction; checked against the archive.
    pub hidden: usize,
}

impl Default for CharLmSpec {
    fn default() -> Self {
        Self {
            model: None,
            hidden: 128,
        }
    }
}

/// Declarative description of one stack member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Char(CharSpec),
    Ngram(NGramSpec),
    Charlm(CharLmSpec),
    PooledCharlm(CharLmSpec),
}

impl EmbedderSpec {
    pub fn declared_dim(&self) -> usize {
        match self {
            EmbedderSpec::Char(s) => 2 * s.hidden,
            EmbedderSpec::Ngram(s) => s.dim,
            EmbedderSpec::Charlm(s) => 2 * s.hidden,
            EmbedderSpec::PooledCharlm(s) => 4 * s.hidden,
        }
    }

    pub fn needs_charlm(&self) -> bool {
        matches!(self, EmbedderSpec::Charlm(_) | EmbedderSpec::PooledCharlm(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    Char(CharEmbedder),
    NGram(NGramEmbedder),
    CharLm(CharLmEmbedder),
    PooledCharLm(CharLmEmbedder),
}

impl Embedder {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Char(e) => e.dim(),
            Embedder::NGram(e) => e.dim(),
            Embedder::CharLm(e) => e.dim(),
            Embedder::PooledCharLm(e) => 2 * e.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Embedder::Char(_) => "char",
            Embedder::NGram(_) => "ngram",
            Embedder::CharLm(_) => "charlm",
            Embedder::PooledCharLm(_) => "pooled_charlm",
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(self, Embedder::Char(_))
    }
}

/// Pooling memories of a stack, one per pooled member, in member order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolState {
    memories: Vec<PooledMemory>,
}

impl PoolState {
    pub fn memories(&self) -> &[PooledMemory] {
        &self.memories
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStack {
    members: Vec<Embedder>,
}

/// Everything needed to build a stack: member specs, a character vocabulary
/// for trainable members, pretrained char-LMs, and the directory relative
/// paths resolve against.
pub struct StackBuilder<'a> {
    pub specs: &'a [EmbedderSpec],
    pub vocab: CharVocab,
    pub charlm: Option<CharLmEmbedder>,
    pub base_dir: &'a Path,
    pub seed: u64,
}

impl StackBuilder<'_> {
    /// Instantiates every member, registering trainable parameters in
    /// `store`, and verifies declared dimensions.
    pub fn build<R: Rng + ?Sized>(self, store: &mut ParamStore, rng: &mut R) -> Result<EmbeddingStack, EmbeddingError> {
        let mut members = Vec::with_capacity(self.specs.len());
        for (i, spec) in self.specs.iter().enumerate() {
            let member = match spec {
                EmbedderSpec::Char(s) => Embedder::Char(CharEmbedder::new(
                    store,
                    &format!("stack.{i}.char"),
                    self.vocab.clone(),
                    s.char_dim,
                    s.hidden,
                    rng,
                )),
                EmbedderSpec::Ngram(s) => {
                    let mut e = NGramEmbedder::new(NGramConfig {
                        dim: s.dim,
                        n_min: s.n_min,
                        n_max: s.n_max,
                        buckets: s.buckets,
                        seed: self.seed.wrapping_add(s.seed_offset),
                    })?;
                    if let Some(path) = &s.vectors {
                        let path = self.base_dir.join(path);
                        let file = File::open(&path).map_err(|source| EmbeddingError::Io {
                            path: path.display().to_string(),
                            source,
                        })?;
                        e.load_word_vectors(BufReader::new(file))?;
                    }
                    Embedder::NGram(e)
                }
                EmbedderSpec::Charlm(_) | EmbedderSpec::PooledCharlm(_) => {
                    let lm = self.charlm.clone().ok_or_else(|| {
                        EmbeddingError::Config(format!("stack member {i} needs a pretrained character LM"))
                    })?;
                    if matches!(spec, EmbedderSpec::Charlm(_)) {
                        Embedder::CharLm(lm)
                    } else {
                        Embedder::PooledCharLm(lm)
                    }
                }
            };
            members.push(member);
        }
        let stack = EmbeddingStack::new(members)?;
        for (i, (spec, m)) in self.specs.iter().zip(&stack.members).enumerate() {
            if spec.declared_dim() != m.dim() {
                return Err(EmbeddingError::DimensionMismatch {
                    member: i,
                    kind: m.kind(),
                    declared: spec.declared_dim(),
                    produced: m.dim(),
                });
            }
        }
        Ok(stack)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MemberManifest {
    Char(CharEmbedder),
    Ngram {
        config: NGramConfig,
        words: Vec<String>,
    },
    Charlm {
        vocab: CharVocab,
        char_dim: usize,
        hidden: usize,
    },
    PooledCharlm {
        vocab: CharVocab,
        char_dim: usize,
        hidden: usize,
    },
}

/// Opaque serialized form of a stack's structure, stored in model manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest(serde_json::Value);

impl EmbeddingStack {
    /// Rejects an empty stack and any member whose output width differs from
    /// its declared dimension on a probe sentence.
    pub fn new(members: Vec<Embedder>) -> Result<Self, EmbeddingError> {
        if members.is_empty() {
            return Err(EmbeddingError::Config("embedding stack has no members".into()));
        }
        let stack = Self { members };
        let probe = crate::ingest::sentences_of("Probe 12.");
        let rows = stack.member_rows_for_probe(&probe[0]);
        for (i, (m, produced)) in stack.members.iter().zip(rows).enumerate() {
            if produced != m.dim() {
                return Err(EmbeddingError::DimensionMismatch {
                    member: i,
                    kind: m.kind(),
                    declared: m.dim(),
                    produced,
                });
            }
        }
        Ok(stack)
    }

    fn member_rows_for_probe(&self, s: &Sentence) -> Vec<usize> {
        let text = "Probe 12.";
        self.members
            .iter()
            .map(|m| match m {
                Embedder::Char(e) => 2 * e.hidden,
                Embedder::NGram(e) => e.ngram_embed(&s.tokens[0].text).len(),
                Embedder::CharLm(e) => e.charlm_embed(s, text).len() / s.len(),
                Embedder::PooledCharLm(e) => 2 * e.charlm_embed(s, text).len() / s.len(),
            })
            .collect()
    }

    pub fn members(&self) -> &[Embedder] {
        &self.members
    }

    pub fn dim(&self) -> usize {
        self.members.iter().map(Embedder::dim).sum()
    }

    /// Width of the precomputed (frozen) part of each token row.
    pub fn frozen_dim(&self) -> usize {
        self.members.iter().filter(|m| !m.trainable()).map(Embedder::dim).sum()
    }

    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.members
            .iter()
            .flat_map(|m| match m {
                Embedder::Char(e) => e.param_ids(),
                _ => Vec::new(),
            })
            .collect()
    }

    pub fn has_pooling(&self) -> bool {
        self.members.iter().any(|m| matches!(m, Embedder::PooledCharLm(_)))
    }

    pub fn new_pool_state(&self) -> PoolState {
        let n = self
            .members
            .iter()
            .filter(|m| matches!(m, Embedder::PooledCharLm(_)))
            .count();
        PoolState {
            memories: vec![PooledMemory::new(); n],
        }
    }

    /// Frozen member outputs for each sentence as a row-major
    /// `tokens x frozen_dim` matrix, members in stack order. Pooled members
    /// fold sentences into `pool` in the given order.
    pub fn frozen_features(
        &self,
        sentences: &[(&Sentence, &str)],
        pool: &mut PoolState,
        exec: Execution,
    ) -> Vec<Vec<f64>> {
        let fd = self.frozen_dim();
        let mut out: Vec<Vec<f64>> = sentences
            .iter()
            .map(|(s, _)| Vec::with_capacity(s.len() * fd))
            .collect();
        let mut parts: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut pooled_idx = 0;
        for m in &self.members {
            let per_sentence: Vec<Vec<f64>> = match m {
                Embedder::Char(_) => continue,
                Embedder::NGram(e) => exec.map(sentences, |(s, _)| {
                    s.tokens.iter().flat_map(|t| e.ngram_embed(&t.text)).collect()
                }),
                Embedder::CharLm(e) => charlm_features(e, sentences, exec),
                Embedder::PooledCharLm(e) => {
                    let ctx = charlm_features(e, sentences, exec);
                    let memory = &mut pool.memories[pooled_idx];
                    pooled_idx += 1;
                    let d = e.dim();
                    sentences
                        .iter()
                        .zip(ctx)
                        .map(|((s, _), c)| {
                            s.tokens
                                .iter()
                                .enumerate()
                                .flat_map(|(k, t)| memory.pooled_embed(&t.text, &c[k * d..(k + 1) * d]))
                                .collect()
                        })
                        .collect()
                }
            };
            parts.push(per_sentence);
        }
        for (si, (s, _)) in sentences.iter().enumerate() {
            for k in 0..s.len() {
                for (p, m) in parts.iter().zip(self.members.iter().filter(|m| !m.trainable())) {
                    let d = m.dim();
                    out[si].extend_from_slice(&p[si][k * d..(k + 1) * d]);
                }
            }
        }
        out
    }

    /// Stacked `N x dim` input for a batch of sentences (rows in sentence
    /// order), with trainable members recorded on `tape` and frozen members
    /// taken from `frozen` (one matrix per sentence from
    /// [`EmbeddingStack::frozen_features`]).
    pub fn embed_on_tape<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        sentences: &[&Sentence],
        frozen: &[&[f64]],
    ) -> Result<Var, EmbeddingError> {
        assert_eq!(sentences.len(), frozen.len(), "one frozen matrix per sentence");
        let n: usize = sentences.iter().map(|s| s.len()).sum();
        let fd = self.frozen_dim();
        let frozen_var = if fd > 0 {
            let mut values = Vec::with_capacity(n * fd);
            for (s, f) in sentences.iter().zip(frozen) {
                assert_eq!(f.len(), s.len() * fd, "frozen matrix matches sentence length");
                values.extend_from_slice(f);
            }
            Some(tape.constant(Tensor::matrix(n, fd, values)?)?)
        } else {
            None
        };
        if self.members.len() == 1 {
            if let (Some(v), false) = (frozen_var, self.members[0].trainable()) {
                return Ok(v);
            }
        }
        let mut parts = Vec::with_capacity(self.members.len());
        let mut col = 0;
        for m in &self.members {
            match m {
                Embedder::Char(e) => {
                    let tokens: Vec<&str> = sentences
                        .iter()
                        .flat_map(|s| s.tokens.iter().map(|t| t.text.as_str()))
                        .collect();
                    parts.push(e.embed_on_tape(tape, store, &tokens)?);
                }
                _ => {
                    let d = m.dim();
                    let f = frozen_var.expect("frozen member implies frozen columns");
                    parts.push(if d == fd { f } else { tape.slice(f, 0, n, col, d)? });
                    col += d;
                }
            }
        }
        Ok(if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, Axis::Cols)?
        })
    }

    /// Inference-time stacked embedding of one sentence, `tokens x dim`.
    pub fn stack_embed(&self, store: &ParamStore, sentence: &Sentence, text: &str, pool: &mut PoolState) -> Vec<f64> {
        if sentence.is_empty() {
            return Vec::new();
        }
        let frozen = self.frozen_features(&[(sentence, text)], pool, Execution::Sequential);
        let mut tape = Tape::new();
        let v = self
            .embed_on_tape(&mut tape, store, &[sentence], &[&frozen[0]])
            .expect("stack shapes validated at construction");
        tape.value(v).to_vec()
    }

    /// Manifest plus frozen tensors under `prefix`; trainable members live in
    /// the caller's parameter store.
    pub fn export(&self, archive: &mut Archive, prefix: &str) -> Result<StackManifest, CheckpointError> {
        let mut manifests = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let p = format!("{prefix}{i}.");
            manifests.push(match m {
                Embedder::Char(e) => MemberManifest::Char(e.clone()),
                Embedder::NGram(e) => {
                    let mut words: Vec<String> = e.words().keys().cloned().collect();
                    words.sort();
                    if !words.is_empty() {
                        let values = words.iter().flat_map(|w| e.words()[w].iter().copied()).collect();
                        archive.insert(
                            format!("{p}words"),
                            Tensor::matrix(words.len(), e.dim(), values).expect("non-empty word table"),
                        );
                    }
                    MemberManifest::Ngram {
                        config: e.config.clone(),
                        words,
                    }
                }
                Embedder::CharLm(e) | Embedder::PooledCharLm(e) => {
                    e.export(archive, &p);
                    let (vocab, char_dim, hidden) = (e.vocab.clone(), e.char_dim(), e.hidden());
                    if matches!(m, Embedder::CharLm(_)) {
                        MemberManifest::Charlm {
                            vocab,
                            char_dim,
                            hidden,
                        }
                    } else {
                        MemberManifest::PooledCharlm {
                            vocab,
                            char_dim,
                            hidden,
                        }
                    }
                }
            });
        }
        Ok(StackManifest(serde_json::to_value(manifests)?))
    }

    /// Inverse of [`EmbeddingStack::export`]. Parameter ids of trainable
    /// members refer to the store saved alongside.
    pub fn import(manifest: &StackManifest, archive: &mut Archive, prefix: &str) -> Result<Self, EmbeddingError> {
        let manifests: Vec<MemberManifest> =
            serde_json::from_value(manifest.0.clone()).map_err(CheckpointError::from)?;
        let mut members = Vec::new();
        for (i, m) in manifests.into_iter().enumerate() {
            let p = format!("{prefix}{i}.");
            members.push(match m {
                MemberManifest::Char(e) => Embedder::Char(e),
                MemberManifest::Ngram { config, words } => {
                    let mut e = NGramEmbedder::new(config)?;
                    if !words.is_empty() {
                        let t = archive.take(&format!("{p}words"), &[words.len(), e.dim()])?;
                        for (w, row) in words.into_iter().zip(t.values().chunks(e.dim())) {
                            e.insert_word(w, row.to_vec())?;
                        }
                    }
                    Embedder::NGram(e)
                }
                MemberManifest::Charlm {
                    vocab,
                    char_dim,
                    hidden,
                } => Embedder::CharLm(CharLmEmbedder::import(archive, &p, vocab, char_dim, hidden)?),
                MemberManifest::PooledCharlm {
                    vocab,
                    char_dim,
                    hidden,
                } => Embedder::PooledCharLm(CharLmEmbedder::import(archive, &p, vocab, char_dim, hidden)?),
            });
        }
        Self::new(members)
    }
}

fn charlm_features(e: &CharLmEmbedder, sentences: &[(&Sentence, &str)], exec: Execution) -> Vec<Vec<f64>> {
    exec.map_chunks(sentences, 64, |_, chunk| e.embed_batch(chunk))
        .into_iter()
        .flatten()
        .collect()
}
