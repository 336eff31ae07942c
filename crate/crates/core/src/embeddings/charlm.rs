//! Contextual string embeddings from a pair of character language models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::CharVocab;
use super::EmbeddingError;
use crate::autodiff::{clip_grad_norm, sgd_step, AutodiffError, Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::{export_store, import_store, Archive, CheckpointError};
use crate::exec::Execution;
use crate::ingest::Sentence;
use crate::lstm::LstmParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharLmConfig {
    pub hidden: usize,
    pub char_dim: usize,
    /// Truncated-BPTT window in characters.
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Windows per SGD step.
    pub batch_windows: usize,
    pub clip_norm: Option<f64>,
    /// Trailing fraction of the corpus held out for perplexity.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for CharLmConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            char_dim: 32,
            window: 128,
            epochs: 3,
            learning_rate: 1.0,
            batch_windows: 8,
            clip_norm: Some(5.0),
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

/// One-directional character LM: embedding table, LSTM, softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CharLm {
    pub store: ParamStore,
    pub table: ParamId,
    pub lstm: LstmParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl CharLm {
    /// Fresh model. The output layer starts at zero, so the untrained
    /// next-character distribution is uniform over the vocabulary.
    pub fn new(vocab_len: usize, char_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let table = store.add(
            "table",
            Tensor::uniform(vocab_len, char_dim, 3f64.sqrt(), &mut rng).with_requires_grad(true),
        );
        let lstm = LstmParams::new(&mut store, "lstm", char_dim, hidden, true, &mut rng);
        let out_w = store.add("out_w", Tensor::zeros(vec![hidden, vocab_len]).with_requires_grad(true));
        let out_b = store.add("out_b", Tensor::zeros(vec![1, vocab_len]).with_requires_grad(true));
        Self {
            store,
            table,
            lstm,
            out_w,
            out_b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    pub fn vocab_len(&self) -> usize {
        self.store.get(self.out_b).numel()
    }

    fn freeze(&mut self, frozen: bool) {
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, !frozen);
            self.store.get_mut(id).clear_grad();
        }
    }

    /// Hidden states for every character of every segment of `ids`.
    fn states<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        ids: &[usize],
        segments: &[(usize, usize)],
        reverse: bool,
    ) -> Result<Var, AutodiffError> {
        let table = tape.param(self.table, store.get(self.table))?;
        let x = tape.gather(table, ids)?;
        self.lstm.run_segments(tape, store, x, segments, reverse)
    }

    /// Summed next-character cross-entropy over windows `(start, len)` of
    /// `ids`, where position `start + k` predicts `start + k + 1`. Returns the
    /// loss node and the number of predictions.
    fn window_loss<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        ids: &[usize],
        windows: &[(usize, usize)],
    ) -> Result<(Var, usize), AutodiffError> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut segments = Vec::new();
        for &(start, len) in windows {
            segments.push((inputs.len(), len));
            inputs.extend_from_slice(&ids[start..start + len]);
            targets.extend_from_slice(&ids[start + 1..start + len + 1]);
        }
        let h = self.states(tape, store, &inputs, &segments, false)?;
        let w = tape.param(self.out_w, store.get(self.out_w))?;
        let b = tape.param(self.out_b, store.get(self.out_b))?;
        let logits = tape.matmul(h, w)?;
        let logits = tape.add(logits, b)?;
        let lse = tape.log_sum_exp(logits, Axis::Cols);
        let total = tape.sum(lse);
        let cells: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
        let gold = tape.select_sum(logits, &cells)?;
        Ok((tape.sub(total, gold)?, targets.len()))
    }

    /// Mean cross-entropy (nats per character) over `ids`, no gradients.
    pub fn cross_entropy(&self, ids: &[usize], window: usize) -> f64 {
        let windows = windows(ids.len(), window);
        if windows.is_empty() {
            return f64::NAN;
        }
        let mut total = 0.0;
        let mut count = 0;
        for chunk in windows.chunks(32) {
            let mut tape = Tape::new();
            let (loss, n) = self
                .window_loss(&mut tape, &self.store, ids, chunk)
                .expect("LM shapes are consistent");
            total += tape.scalar(loss);
            count += n;
        }
        total / count as f64
    }
}

/// Windows `(start, len)` covering positions `0..n-1`, each predicting its
/// successor; consecutive windows do not share state.
fn windows(n: usize, window: usize) -> Vec<(usize, usize)> {
    let predictable = n.saturating_sub(1);
    (0..predictable)
        .step_by(window.max(1))
        .map(|s| (s, window.min(predictable - s)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub train_loss: Vec<f64>,
    pub heldout_loss: Vec<f64>,
    pub initial_heldout_loss: f64,
}

impl DirectionReport {
    pub fn perplexity(&self) -> f64 {
        self.heldout_loss
            .last()
            .copied()
            .unwrap_or(self.initial_heldout_loss)
            .exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub forward: DirectionReport,
    pub backward: DirectionReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharLmEmbedder {
    pub vocab: CharVocab,
    pub forward: CharLm,
    pub backward: CharLm,
}

#[derive(Serialize, Deserialize)]
struct LmManifest {
    kind: String,
    vocab: CharVocab,
    char_dim: usize,
    hidden: usize,
}

fn train_direction(
    ids: &[usize],
    vocab_len: usize,
    config: &CharLmConfig,
    seed: u64,
) -> Result<(CharLm, DirectionReport), EmbeddingError> {
    let split = ((ids.len() as f64) * (1.0 - config.holdout_fraction)).round() as usize;
    let (train, heldout) = ids.split_at(split.min(ids.len()));
    let mut lm = CharLm::new(vocab_len, config.char_dim, config.hidden, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut all = windows(train.len(), config.window);
    let held = if heldout.len() >= 2 { heldout } else { train };
    let mut report = DirectionReport {
        train_loss: Vec::new(),
        heldout_loss: Vec::new(),
        initial_heldout_loss: lm.cross_entropy(held, config.window),
    };
    for epoch in 0..config.epochs {
        all.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for (step, batch) in all.chunks(config.batch_windows.max(1)).enumerate() {
            let grads = {
                let mut tape = Tape::new();
                let (loss, n) = lm.window_loss(&mut tape, &lm.store, train, batch)?;
                let sum = tape.scalar(loss);
                if !sum.is_finite() {
                    return Err(EmbeddingError::NonFinite {
                        epoch: epoch + 1,
                        step: step + 1,
                    });
                }
                total += sum;
                count += n;
                let mean = tape.scale(loss, 1.0 / n as f64);
                tape.backward(mean)?
            };
            lm.store.zero_grads();
            lm.store.accumulate(&grads)?;
            let mut params = lm.store.trainable_mut();
            if let Some(max) = config.clip_norm {
                clip_grad_norm(&mut params, max);
            }
            sgd_step(params, config.learning_rate)?;
        }
        report.train_loss.push(total / count.max(1) as f64);
        report.heldout_loss.push(lm.cross_entropy(held, config.window));
        log::info!(
            "char-LM (seed {seed}) epoch {}: train {:.4} held-out {:.4} nats/char",
            epoch + 1,
            report.train_loss[epoch],
            report.heldout_loss[epoch]
        );
    }
    lm.freeze(true);
    Ok((lm, report))
}

/// Trains a forward LM on `corpus` and a backward LM on its reversal.
pub fn pretrain_charlm(
    corpus: &str,
    config: &CharLmConfig,
    exec: Execution,
) -> Result<(CharLmEmbedder, PretrainReport), EmbeddingError> {
    let chars = corpus.chars().count();
    let train_chars = ((chars as f64) * (1.0 - config.holdout_fraction)).round() as usize;
    if train_chars < config.window + 1 {
        return Err(EmbeddingError::CorpusTooSmall {
            chars,
            window: config.window,
        });
    }
    if config.learning_rate.is_nan()
        || config.learning_rate <= 0.0
        || config.hidden == 0
        || config.char_dim == 0
        || config.window == 0
    {
        return Err(EmbeddingError::Config(format!(
            "invalid char-LM configuration {config:?}"
        )));
    }
    let vocab = CharVocab::build([corpus]);
    let fwd_ids = vocab.encode(corpus);
    let mut bwd_ids = fwd_ids.clone();
    bwd_ids.reverse();
    let jobs = [(fwd_ids, config.seed), (bwd_ids, config.seed.wrapping_add(1))];
    let mut results = exec
        .map(&jobs, |(ids, seed)| train_direction(ids, vocab.len(), config, *seed))
        .into_iter();
    let (forward, fr) = results.next().expect("two directions")?;
    let (backward, br) = results.next().expect("two directions")?;
    Ok((
        CharLmEmbedder {
            vocab,
            forward,
            backward,
        },
        PretrainReport {
            forward: fr,
            backward: br,
        },
    ))
}

/// Sentences per embedding batch; bounds the recurrence cache.
const EMBED_BATCH: usize = 64;

impl CharLmEmbedder {
    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn dim(&self) -> usize {
        2 * self.hidden()
    }

    /// Per-token `[forward state at last char, backward state at first char]`
    /// over the sentence's full character string, as a row-major
    /// `tokens x 2h` matrix.
    pub fn charlm_embed(&self, sentence: &Sentence, text: &str) -> Vec<f64> {
        self.embed_batch(&[(sentence, text)])
            .pop()
            .expect("one sentence in, one out")
    }

    /// [`CharLmEmbedder::charlm_embed`] for many sentences, batched through
    /// each LSTM.
    pub fn embed_batch(&self, sentences: &[(&Sentence, &str)]) -> Vec<Vec<f64>> {
        let h = self.hidden();
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(EMBED_BATCH) {
            let mut ids = Vec::new();
            let mut segments = Vec::new();
            let mut bases = Vec::new();
            for (sentence, text) in chunk {
                let base = ids.len();
                let (s, e) = (sentence.start(), sentence.end());
                ids.extend(text.chars().skip(s).take(e - s).map(|c| self.vocab.get(c)));
                if ids.len() > base {
                    segments.push((base, ids.len() - base));
                }
                bases.push((base, s));
            }
            if segments.is_empty() {
                out.extend(chunk.iter().map(|_| Vec::new()));
                continue;
            }
            let (fwd, bwd) = {
                let mut tape = Tape::new();
                let f = self
                    .forward
                    .states(&mut tape, &self.forward.store, &ids, &segments, false)
                    .expect("LM shapes are consistent");
                let mut tape_b = Tape::new();
                let b = self
                    .backward
                    .states(&mut tape_b, &self.backward.store, &ids, &segments, true)
                    .expect("LM shapes are consistent");
                (tape.value(f).to_vec(), tape_b.value(b).to_vec())
            };
            for ((sentence, _), (base, s)) in chunk.iter().zip(bases) {
                let mut m = Vec::with_capacity(sentence.len() * 2 * h);
                for tok in &sentence.tokens {
                    let last = base + tok.end - 1 - s;
                    let first = base + tok.start - s;
                    m.extend_from_slice(&fwd[last * h..(last + 1) * h]);
                    m.extend_from_slice(&bwd[first * h..(first + 1) * h]);
                }
                out.push(m);
            }
        }
        out
    }

    pub fn to_archive(&self) -> Result<Archive, CheckpointError> {
        let mut a = Archive::new(&LmManifest {
            kind: "charlm".into(),
            vocab: self.vocab.clone(),
            char_dim: self.forward.store.get(self.forward.table).shape()[1],
            hidden: self.hidden(),
        })?;
        self.export(&mut a, "");
        Ok(a)
    }

    pub fn export(&self, archive: &mut Archive, prefix: &str) {
        export_store(&self.forward.store, archive, &format!("{prefix}fwd."));
        export_store(&self.backward.store, archive, &format!("{prefix}bwd."));
    }

    /// Rebuilds the embedder shape from the given dimensions and loads its
    /// tensors from `archive`.
    pub fn import(
        archive: &mut Archive,
        prefix: &str,
        vocab: CharVocab,
        char_dim: usize,
        hidden: usize,
    ) -> Result<Self, CheckpointError> {
        let mut forward = CharLm::new(vocab.len(), char_dim, hidden, 0);
        let mut backward = CharLm::new(vocab.len(), char_dim, hidden, 0);
        import_store(&mut forward.store, archive, &format!("{prefix}fwd."))?;
        import_store(&mut backward.store, archive, &format!("{prefix}bwd."))?;
        forward.freeze(true);
        backward.freeze(true);
        Ok(Self {
            vocab,
            forward,
            backward,
        })
    }

    pub fn from_archive(mut archive: Archive) -> Result<Self, CheckpointError> {
        let m: LmManifest = archive.manifest()?;
        if m.kind != "charlm" {
            return Err(CheckpointError::Corrupt(format!(
                "expected a char-LM archive, found `{}`",
                m.kind
            )));
        }
        Self::import(&mut archive, "", m.vocab, m.char_dim, m.hidden)
    }

    pub fn char_dim(&self) -> usize {
        self.forward.store.get(self.forward.table).shape()[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::sentences_of;
    use crate::linalg::sigmoid;

    fn tiny() -> CharLmConfig {
        CharLmConfig {
            hidden: 8,
            char_dim: 4,
            window: 16,
            epochs: 1,
            batch_windows: 4,
            ..Default::default()
        }
    }

    #[test]
    fn windows_cover_every_prediction_once() {
        assert_eq!(windows(10, 4), vec![(0, 4), (4, 4), (8, 1)]);
        assert_eq!(windows(9, 4), vec![(0, 4), (4, 4)]);
        assert!(windows(1, 4).is_empty());
    }

    #[test]
    fn untrained_model_is_uniform() {
        let lm = CharLm::new(7, 4, 5, 1);
        let ce = lm.cross_entropy(&[1, 2, 3, 4, 5, 6, 0, 1, 2], 4);
        assert!((ce.exp() - 7.0).abs() < 1e-9, "{}", ce.exp());
    }

    #[test]
    fn rejects_tiny_corpus() {
        let err = pretrain_charlm("abc", &tiny(), Execution::Sequential).unwrap_err();
        assert!(matches!(err, EmbeddingError::CorpusTooSmall { .. }));
    }

    #[test]
    fn token_features_read_the_right_positions() {
        let text = "ab cd. ef";
        let (emb, _) = pretrain_charlm(&text.repeat(10), &tiny(), Execution::Sequential).unwrap();
        let sents = sentences_of(text);
        let m = emb.charlm_embed(&sents[0], text);
        let h = emb.hidden();
        assert_eq!(m.len(), 3 * 2 * h);
        // Forward feature of "cd" is the forward state at 'd' over the sentence string "ab cd.".
        let mut tape = Tape::new();
        let ids = emb.vocab.encode("ab cd.");
        let f = emb
            .forward
            .states(&mut tape, &emb.forward.store, &ids, &[(0, 6)], false)
            .unwrap();
        let states = tape.value(f).to_vec();
        assert_eq!(&m[2 * h..3 * h], &states[4 * h..5 * h]);
        // Second sentence starts fresh: its first token sees only "ef".
        let m2 = emb.charlm_embed(&sents[1], text);
        let alone = emb.charlm_embed(&sentences_of("ef")[0], "ef");
        assert_eq!(m2, alone);
    }

    #[test]
    fn single_character_matches_hand_step() {
        let mut lm = CharLm::new(2, 1, 1, 0);
        let s = &mut lm.store;
        s.get_mut(lm.table).values_mut().copy_from_slice(&[0.0, 1.5]);
        s.get_mut(lm.lstm.w_x)
            .values_mut()
            .copy_from_slice(&[0.2, -0.4, 0.6, 0.8]);
        s.get_mut(lm.lstm.bias)
            .values_mut()
            .copy_from_slice(&[0.0, 0.0, 0.1, -0.1]);
        let emb = CharLmEmbedder {
            vocab: CharVocab::from(vec!['x']),
            forward: lm.clone(),
            backward: lm,
        };
        let z = [0.3, -0.6, 1.0, 1.1];
        let c = sigmoid(z[0]) * z[2].tanh();
        let want = sigmoid(z[3]) * c.tanh();
        let got = emb.charlm_embed(&sentences_of("x")[0], "x");
        assert_eq!(got.len(), 2);
        assert!(
            (got[0] - want).abs() < 1e-15 && (got[1] - want).abs() < 1e-15,
            "{got:?} vs {want}"
        );
    }

    #[test]
    fn archive_round_trip_and_determinism() {
        let text = "el paciente ingresa. ".repeat(8);
        let (a, ra) = pretrain_charlm(&text, &tiny(), Execution::Sequential).unwrap();
        let (b, rb) = pretrain_charlm(&text, &tiny(), Execution::default()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        let bytes = a.to_archive().unwrap().to_bytes().unwrap();
        let back = CharLmEmbedder::from_archive(Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
