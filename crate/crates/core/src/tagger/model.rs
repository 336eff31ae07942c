use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::crf::viterbi_decode;
use super::{LabelInventory, TaggerError, TrainConfig, TrainingLog};
use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::{Archive, CheckpointError};
use crate::embeddings::{EmbeddingStack, PoolState, StackManifest};
use crate::exec::Execution;
use crate::ingest::{decode_bio, sentences_of, AnnotatedDocument, Bio, PhiSpan, Sentence};
use crate::lstm::LstmParams;

/// Sentences per prediction chunk.
const PREDICT_CHUNK: usize = 32;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub config: Option<TrainConfig>,
    pub log: TrainingLog,
}

/// BiLSTM-CRF over an embedding stack. `store` holds every trainable tensor,
/// including those of trainable stack members.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggerModel {
    pub labels: LabelInventory,
    pub stack: EmbeddingStack,
    pub store: ParamStore,
    pub hidden: usize,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub emission_w: ParamId,
    pub emission_b: ParamId,
    /// `(L+2) x (L+2)`, `[from][to]`, START = L, END = L+1.
    pub transitions: ParamId,
    pub meta: TrainingMeta,
}

pub(crate) struct Prepared {
    pub doc_of: Vec<usize>,
    pub sentences: Vec<Sentence>,
    pub frozen: Vec<Vec<f64>>,
}

/// Network outputs for a batch of sentences.
pub(crate) struct Emissions {
    pub var: Var,
    pub segments: Vec<(usize, usize)>,
}

impl TaggerModel {
    /// Adds the BiLSTM, emission projection and zero transitions to `store`
    /// (which already holds the stack's trainable parameters).
    pub fn new<R: Rng + ?Sized>(
        stack: EmbeddingStack,
        mut store: ParamStore,
        labels: LabelInventory,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, TaggerError> {
        if hidden == 0 {
            return Err(TaggerError::Config("hidden size must be positive".into()));
        }
        let d = stack.dim();
        let l = labels.len();
        let forward = LstmParams::new(&mut store, "bilstm.fwd", d, hidden, true, rng);
        let backward = LstmParams::new(&mut store, "bilstm.bwd", d, hidden, true, rng);
        let emission_w = store.add(
            "emission.w",
            Tensor::xavier(2 * hidden, l, rng).with_requires_grad(true),
        );
        let emission_b = store.add("emission.b", Tensor::zeros(vec![1, l]).with_requires_grad(true));
        let transitions = store.add(
            "crf.transitions",
            Tensor::zeros(vec![l + 2, l + 2]).with_requires_grad(true),
        );
        let model = Self {
            labels,
            stack,
            store,
            hidden,
            forward,
            backward,
            emission_w,
            emission_b,
            transitions,
            meta: TrainingMeta::default(),
        };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    /// Records `stack -> [dropout] -> BiLSTM -> linear` for the given
    /// sentences. `dropout` is `(p, rng)`; masks use inverted scaling.
    pub(crate) fn emissions_on_tape<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        sentences: &[&Sentence],
        frozen: &[&[f64]],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Emissions, TaggerError> {
        let store = &self.store;
        let mut x = self.stack.embed_on_tape(tape, store, sentences, frozen)?;
        if let Some((p, rng)) = dropout {
            if p > 0.0 {
                let (n, d) = tape.dims(x);
                let keep = 1.0 / (1.0 - p);
                let mask = (0..n * d)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                x = tape.mul_const(x, mask)?;
            }
        }
        let mut segments = Vec::with_capacity(sentences.len());
        let mut row = 0;
        for s in sentences {
            segments.push((row, s.len()));
            row += s.len();
        }
        let hf = self.forward.run_segments(tape, store, x, &segments, false)?;
        let hb = self.backward.run_segments(tape, store, x, &segments, true)?;
        let h = tape.concat(&[hf, hb], Axis::Cols)?;
        let w = tape.param(self.emission_w, store.get(self.emission_w))?;
        let b = tape.param(self.emission_b, store.get(self.emission_b))?;
        let e = tape.matmul(h, w)?;
        let var = tape.add(e, b)?;
        Ok(Emissions { var, segments })
    }

    /// Viterbi label indices for each sentence.
    fn decode_batch(&self, sentences: &[&Sentence], frozen: &[&[f64]]) -> Result<Vec<Vec<usize>>, TaggerError> {
        let mut tape = Tape::new();
        let em = self.emissions_on_tape(&mut tape, sentences, frozen, None)?;
        let l = self.n_labels();
        let values = tape.value(em.var);
        let trans = self.store.get(self.transitions).values();
        Ok(em
            .segments
            .iter()
            .map(|&(a, n)| viterbi_decode(&values[a * l..(a + n) * l], trans, l).0)
            .collect())
    }

    /// Labels every sentence of `docs`; pooled stack members see the
    /// documents in the given order.
    pub fn predict_documents(
        &self,
        docs: &[AnnotatedDocument],
        exec: Execution,
    ) -> Result<Vec<AnnotatedDocument>, TaggerError> {
        let mut pool = self.stack.new_pool_state();
        self.predict_documents_with(docs, &mut pool, exec)
    }

    pub fn predict_documents_with(
        &self,
        docs: &[AnnotatedDocument],
        pool: &mut PoolState,
        exec: Execution,
    ) -> Result<Vec<AnnotatedDocument>, TaggerError> {
        let prepared = self.prepare(docs, pool, exec);
        self.decode_prepared(docs, &prepared, exec)
    }

    /// Tokenized non-empty sentences of `docs` with their frozen features.
    pub(crate) fn prepare(&self, docs: &[AnnotatedDocument], pool: &mut PoolState, exec: Execution) -> Prepared {
        let mut doc_of = Vec::new();
        let mut sentences = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            for s in sentences_of(&d.text).into_iter().filter(|s| !s.is_empty()) {
                doc_of.push(i);
                sentences.push(s);
            }
        }
        let pairs: Vec<(&Sentence, &str)> = sentences
            .iter()
            .zip(&doc_of)
            .map(|(s, &i)| (s, docs[i].text.as_str()))
            .collect();
        let frozen = self.stack.frozen_features(&pairs, pool, exec);
        Prepared {
            doc_of,
            sentences,
            frozen,
        }
    }

    pub(crate) fn decode_prepared(
        &self,
        docs: &[AnnotatedDocument],
        prepared: &Prepared,
        exec: Execution,
    ) -> Result<Vec<AnnotatedDocument>, TaggerError> {
        let items: Vec<(&Sentence, &[f64])> = prepared
            .sentences
            .iter()
            .zip(&prepared.frozen)
            .map(|(s, f)| (s, f.as_slice()))
            .collect();
        let decoded = exec.map_chunks(&items, PREDICT_CHUNK, |_, chunk| {
            let (s, f): (Vec<&Sentence>, Vec<&[f64]>) = chunk.iter().copied().unzip();
            self.decode_batch(&s, &f)
        });
        let mut spans: Vec<Vec<PhiSpan>> = vec![Vec::new(); docs.len()];
        let mut k = 0;
        for chunk in decoded {
            for idx in chunk? {
                let d = prepared.doc_of[k];
                let s = &prepared.sentences[k];
                let bio: Vec<Bio> = idx.iter().map(|&i| self.labels.label(i).clone()).collect();
                spans[d].extend(decode_bio(s, &bio, &docs[d].text));
                k += 1;
            }
        }
        Ok(docs
            .iter()
            .zip(spans)
            .map(|(d, mut s)| {
                s.sort();
                d.with_spans_replaced(s)
            })
            .collect())
    }

    /// Spans for a single text, with a fresh pooling memory.
    pub fn predict(&self, doc_id: &str, text: &str) -> Result<AnnotatedDocument, TaggerError> {
        let doc = AnnotatedDocument::new(doc_id, text);
        let mut out = self.predict_documents(std::slice::from_ref(&doc), Execution::Sequential)?;
        Ok(out.pop().expect("one document in, one out"))
    }

    fn check_shapes(&self) -> Result<(), TaggerError> {
        let l = self.n_labels();
        let h = self.hidden;
        let d = self.stack.dim();
        let mut expected: Vec<(ParamId, Vec<usize>)> = vec![
            (self.emission_w, vec![2 * h, l]),
            (self.emission_b, vec![1, l]),
            (self.transitions, vec![l + 2, l + 2]),
        ];
        for (lstm, input) in [(self.forward, d), (self.backward, d)] {
            if lstm.input != input || lstm.hidden != h {
                return Err(TaggerError::Config(format!(
                    "BiLSTM expects input {input} and hidden {h}, found {} and {}",
                    lstm.input, lstm.hidden
                )));
            }
            expected.push((lstm.w_x, vec![input, 4 * h]));
            expected.push((lstm.w_h, vec![h, 4 * h]));
            expected.push((lstm.bias, vec![1, 4 * h]));
        }
        for m in self.stack.members() {
            if let crate::embeddings::Embedder::Char(c) = m {
                expected.push((c.table, vec![c.vocab.len(), c.char_dim]));
                for lstm in [c.forward, c.backward] {
                    expected.push((lstm.w_x, vec![c.char_dim, 4 * c.hidden]));
                    expected.push((lstm.w_h, vec![c.hidden, 4 * c.hidden]));
                    expected.push((lstm.bias, vec![1, 4 * c.hidden]));
                }
            }
        }
        for (id, shape) in expected {
            if id.index() >= self.store.len() || self.store.get(id).shape() != shape.as_slice() {
                let found = (id.index() < self.store.len()).then(|| self.store.get(id).shape().to_vec());
                let name = if id.index() < self.store.len() {
                    self.store.name(id).to_string()
                } else {
                    format!("param #{}", id.index())
                };
                return Err(TaggerError::Checkpoint(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: found.unwrap_or_default(),
                }));
            }
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive, TaggerError> {
        let mut archive = Archive::default();
        let stack = self.stack.export(&mut archive, "stack.")?;
        let params = self
            .store
            .iter()
            .map(|(_, name, t)| {
                let mut t = t.clone();
                t.clear_grad();
                archive.insert(format!("param.{name}"), t.clone());
                (name.to_string(), t.requires_grad())
            })
            .collect();
        let manifest = ModelManifest {
            kind: MODEL_KIND.into(),
            labels: self.labels.clone(),
            stack,
            hidden: self.hidden,
            forward: self.forward,
            backward: self.backward,
            emission_w: self.emission_w,
            emission_b: self.emission_b,
            transitions: self.transitions,
            params,
            meta: self.meta.clone(),
        };
        archive.manifest = serde_json::to_value(&manifest).map_err(CheckpointError::from)?;
        Ok(archive)
    }

    pub fn from_archive(mut archive: Archive) -> Result<Self, TaggerError> {
        let m: ModelManifest = archive.manifest()?;
        if m.kind != MODEL_KIND {
            return Err(CheckpointError::Corrupt(format!("expected a tagger archive, found `{}`", m.kind)).into());
        }
        let stack = EmbeddingStack::import(&m.stack, &mut archive, "stack.")?;
        let mut store = ParamStore::new();
        for (name, trainable) in &m.params {
            let t = archive.take_any(&format!("param.{name}"))?;
            store.add(name.clone(), t.with_requires_grad(*trainable));
        }
        let model = Self {
            labels: m.labels,
            stack,
            store,
            hidden: m.hidden,
            forward: m.forward,
            backward: m.backward,
            emission_w: m.emission_w,
            emission_b: m.emission_b,
            transitions: m.transitions,
            meta: m.meta,
        };
        model.check_shapes()?;
        if let Some((_, name, _)) = model.store.iter().find(|(_, _, t)| !t.is_finite()) {
            return Err(CheckpointError::Corrupt(format!("parameter {name} is not finite")).into());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TaggerError> {
        Ok(self.to_archive()?.write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TaggerError> {
        Self::from_archive(Archive::read(path)?)
    }
}

const MODEL_KIND: &str = "tagger";

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    kind: String,
    labels: LabelInventory,
    stack: StackManifest,
    hidden: usize,
    forward: LstmParams,
    backward: LstmParams,
    emission_w: ParamId,
    emission_b: ParamId,
    transitions: ParamId,
    params: Vec<(String, bool)>,
    meta: TrainingMeta,
}

/// Deterministic sub-seed from a base seed and a path of indices.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        // splitmix64 finalizer
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) fn dropout_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}
