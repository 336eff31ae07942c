//! Trainable character-BiLSTM word embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::CharVocab;
use crate::autodiff::{AutodiffError, Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::lstm::LstmParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharEmbedder {
    pub vocab: CharVocab,
    pub char_dim: usize,
    pub hidden: usize,
    pub table: ParamId,
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl CharEmbedder {
    /// Registers the embedding table (uniform, unit variance) and both LSTMs
    /// in `store`, all trainable.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: CharVocab,
        char_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(
            format!("{prefix}.table"),
            Tensor::uniform(vocab.len(), char_dim, 3f64.sqrt(), rng).with_requires_grad(true),
        );
        let forward = LstmParams::new(store, &format!("{prefix}.fwd"), char_dim, hidden, true, rng);
        let backward = LstmParams::new(store, &format!("{prefix}.bwd"), char_dim, hidden, true, rng);
        Self {
            vocab,
            char_dim,
            hidden,
            table,
            forward,
            backward,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.table];
        ids.extend(self.forward.ids());
        ids.extend(self.backward.ids());
        ids
    }

    /// `tokens.len() x 2h` matrix of `[last forward state, last backward
    /// state]` per token. All tokens run through each LSTM as one batch; an
    /// empty token yields a zero row.
    pub fn embed_on_tape<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        tokens: &[&str],
    ) -> Result<Var, AutodiffError> {
        let mut ids = Vec::new();
        let mut segments = Vec::new();
        for tok in tokens {
            let start = ids.len();
            ids.extend(self.vocab.encode(tok));
            if ids.len() > start {
                segments.push((start, ids.len() - start));
            }
        }
        let total = ids.len();
        let h = self.hidden;
        let zero_row = total;
        let mut last_fwd = Vec::with_capacity(tokens.len());
        let mut last_bwd = Vec::with_capacity(tokens.len());
        let mut seg = segments.iter();
        for tok in tokens {
            if tok.is_empty() {
                last_fwd.push(zero_row);
                last_bwd.push(zero_row);
            } else {
                let &(start, len) = seg.next().expect("one segment per non-empty token");
                last_fwd.push(start + len - 1);
                last_bwd.push(start);
            }
        }
        let zeros = tape.constant(Tensor::zeros(vec![1, h]))?;
        if total == 0 {
            let rows = vec![0; tokens.len()];
            let z = tape.gather(zeros, &rows)?;
            return tape.concat(&[z, z], Axis::Cols);
        }
        let table = tape.param(self.table, store.get(self.table))?;
        let chars = tape.gather(table, &ids)?;
        let hf = self.forward.run_segments(tape, store, chars, &segments, false)?;
        let hb = self.backward.run_segments(tape, store, chars, &segments, true)?;
        let hf = tape.concat(&[hf, zeros], Axis::Rows)?;
        let hb = tape.concat(&[hb, zeros], Axis::Rows)?;
        let f = tape.gather(hf, &last_fwd)?;
        let b = tape.gather(hb, &last_bwd)?;
        tape.concat(&[f, b], Axis::Cols)
    }

    /// Embedding of a single token, outside any training tape.
    pub fn char_embed(&self, store: &ParamStore, token: &str) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = self
            .embed_on_tape(&mut tape, store, &[token])
            .expect("char embedder shapes are consistent");
        tape.value(v).to_vec()
    }
}
