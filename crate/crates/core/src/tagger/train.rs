use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{derive_seed, dropout_rng, Prepared};
use super::{TaggerError, TaggerModel};
use crate::autodiff::{clip_grad_norm, sgd_step, Gradients, Tape};
use crate::embeddings::EmbeddingStack;
use crate::eval::evaluate_ner;
use crate::exec::Execution;
use crate::ingest::{encode_bio, AnnotatedDocument, Sentence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Dropout probability on the stacked token vectors.
    pub dropout: f64,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// BiLSTM hidden size per direction.
    pub hidden: usize,
    /// Joint gradient L2 norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Sentences per gradient tape. Fixed so that results do not depend on
    /// the execution mode.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 32,
            dropout: 0.5,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            hidden: 256,
            clip_norm: Some(5.0),
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TaggerError> {
        let bad = |m: &str| Err(TaggerError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be a positive number");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.hidden == 0 || self.chunk_size == 0 {
            return bad("batch_size, max_epochs, hidden and chunk_size must be positive");
        }
        if matches!(self.clip_norm, Some(c) if !(c.is_finite() && c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean sentence negative log-likelihood over the epoch.
    pub train_loss: f64,
    pub dev_f1: f64,
    pub improved: bool,
}

/// Append-only record of training epochs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn dev_f1_trajectory(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.dev_f1).collect()
    }
}

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;
const INIT: u64 = 3;

/// Builds a model around `stack` (whose trainable parameters live in
/// `store`) and fits it.
pub fn train(
    train_docs: &[AnnotatedDocument],
    dev_docs: &[AnnotatedDocument],
    stack: EmbeddingStack,
    store: crate::autodiff::ParamStore,
    labels: super::LabelInventory,
    config: &TrainConfig,
    exec: Execution,
) -> Result<(TaggerModel, TrainingLog), TaggerError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, INIT]));
    let mut model = TaggerModel::new(stack, store, labels, config.hidden, &mut rng)?;
    let log = model.fit(train_docs, dev_docs, config, exec)?;
    Ok((model, log))
}

impl TaggerModel {
    /// Mini-batch SGD on the mean sentence CRF loss with early stopping on
    /// dev strict micro-F1. The best-scoring parameters are kept.
    pub fn fit(
        &mut self,
        train_docs: &[AnnotatedDocument],
        dev_docs: &[AnnotatedDocument],
        config: &TrainConfig,
        exec: Execution,
    ) -> Result<TrainingLog, TaggerError> {
        config.validate()?;
        if train_docs.is_empty() {
            return Err(TaggerError::EmptySplit("train"));
        }
        if dev_docs.is_empty() {
            return Err(TaggerError::EmptySplit("dev"));
        }
        let train = self.prepare(train_docs, &mut self.stack.new_pool_state(), exec);
        let gold = self.gold_indices(train_docs, &train)?;
        let dev = self.prepare(dev_docs, &mut self.stack.new_pool_state(), exec);
        log::info!(
            "training on {} sentences ({} tokens), dev {} sentences, {} labels",
            train.sentences.len(),
            train.sentences.iter().map(Sentence::len).sum::<usize>(),
            dev.sentences.len(),
            self.n_labels()
        );

        let mut log = TrainingLog::default();
        let mut best: Option<(crate::autodiff::ParamStore, f64, usize)> = None;
        let mut since_best = 0;
        for epoch in 1..=config.max_epochs {
            let mut order: Vec<usize> = (0..train.sentences.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[
                config.seed,
                SHUFFLE,
                epoch as u64,
            ])));
            let mut loss_sum = 0.0;
            for (b, batch) in order.chunks(config.batch_size).enumerate() {
                let scale = 1.0 / batch.len() as f64;
                let parts = exec.map_chunks(batch, config.chunk_size, |c, idx| {
                    let mut rng = dropout_rng(&[config.seed, DROPOUT, epoch as u64, b as u64, c as u64]);
                    self.chunk_gradients(&train, &gold, idx, config.dropout, scale, &mut rng)
                });
                let mut merged = Gradients::default();
                for part in parts {
                    let (g, loss) = part?;
                    if !loss.is_finite() {
                        return Err(TaggerError::NonFinite { epoch, batch: b + 1 });
                    }
                    loss_sum += loss;
                    merged.merge(&g);
                }
                self.store.zero_grads();
                self.store.accumulate(&merged)?;
                let mut params = self.store.trainable_mut();
                if let Some(max) = config.clip_norm {
                    clip_grad_norm(&mut params, max);
                }
                sgd_step(params, config.learning_rate)?;
            }
            let predicted = self.decode_prepared(dev_docs, &dev, exec)?;
            let dev_f1 = evaluate_ner(dev_docs, &predicted)?.micro.f1;
            let improved = best.as_ref().is_none_or(|(_, f, _)| dev_f1 > *f);
            let train_loss = loss_sum / train.sentences.len().max(1) as f64;
            log::info!(
                "epoch {epoch}: train loss {train_loss:.4}, dev F1 {dev_f1:.4}{}",
                if improved { " *" } else { "" }
            );
            log.epochs.push(EpochRecord {
                epoch,
                train_loss,
                dev_f1,
                improved,
            });
            if improved {
                let mut snapshot = self.store.clone();
                snapshot.clear_grads();
                best = Some((snapshot, dev_f1, epoch));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= config.patience {
                break;
            }
        }
        let (store, best_f1, best_epoch) = best.expect("at least one epoch ran");
        self.store = store;
        self.meta = super::TrainingMeta {
            seed: config.seed,
            epochs_run: log.epochs.len(),
            best_epoch,
            best_dev_f1: best_f1,
            config: Some(config.clone()),
            log: log.clone(),
        };
        Ok(log)
    }

    fn gold_indices(&self, docs: &[AnnotatedDocument], prepared: &Prepared) -> Result<Vec<Vec<usize>>, TaggerError> {
        prepared
            .sentences
            .iter()
            .zip(&prepared.doc_of)
            .map(|(s, &d)| {
                let doc = &docs[d];
                encode_bio(s, &doc.spans)
                    .labels
                    .iter()
                    .map(|l| {
                        self.labels.index(l).ok_or_else(|| TaggerError::UnknownLabel {
                            doc_id: doc.doc_id.clone(),
                            label: l.to_string(),
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Gradients of `scale * sum(crf_nll)` over the sentences `idx`, and the
    /// unscaled loss.
    fn chunk_gradients(
        &self,
        data: &Prepared,
        gold: &[Vec<usize>],
        idx: &[usize],
        dropout: f64,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Gradients, f64), TaggerError> {
        let sentences: Vec<&Sentence> = idx.iter().map(|&i| &data.sentences[i]).collect();
        let frozen: Vec<&[f64]> = idx.iter().map(|&i| data.frozen[i].as_slice()).collect();
        let mut tape = Tape::new();
        let em = self.emissions_on_tape(&mut tape, &sentences, &frozen, Some((dropout, rng)))?;
        let l = self.n_labels();
        let (start, end) = (l, l + 1);
        let t = tape.param(self.transitions, self.store.get(self.transitions))?;
        let log_z = tape.crf_log_partition(em.var, t, &em.segments)?;
        let log_z = tape.sum(log_z);
        let mut em_cells = Vec::new();
        let mut tr_cells = Vec::new();
        for (&i, &(row, _)) in idx.iter().zip(&em.segments) {
            let y = &gold[i];
            em_cells.extend(y.iter().enumerate().map(|(k, &label)| (row + k, label)));
            let mut prev = start;
            for &label in y {
                tr_cells.push((prev, label));
                prev = label;
            }
            tr_cells.push((prev, end));
        }
        let gold_em = tape.select_sum(em.var, &em_cells)?;
        let gold_tr = tape.select_sum(t, &tr_cells)?;
        let gold_score = tape.add(gold_em, gold_tr)?;
        let nll = tape.sub(log_z, gold_score)?;
        let loss = tape.scalar(nll);
        let scaled = tape.scale(nll, scale);
        Ok((tape.backward(scaled)?, loss))
    }
}
