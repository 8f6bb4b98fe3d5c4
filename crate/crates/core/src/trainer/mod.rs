//! Cross-entropy training with AdamW, gradient accumulation and words-seen
//! checkpoint milestones.
//!
//! Gradients of the micro-batches in one accumulation group are averaged and
//! applied as a single optimizer step. Word estimates and milestone checks run
//! after every micro-batch, so small milestones are not skipped when the
//! effective batch is large. A milestone reached in the middle of a group is
//! reported with the parameters as of the group start (they only change at
//! the end of a group) and with progress that points back at the group start,
//! so a resumed run replays the group and continues identically.

mod loss;
mod optim;
mod schedule;

pub use loss::cross_entropy_loss;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{estimate_words, milestones, schedule_crossings, ScheduleState};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::{loss_and_grad, ParameterSet, Row, Scalar};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in optimizer steps; 0 keeps the learning rate constant.
    pub warmup_steps: u64,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub word_ratio: f64,
    pub seed: u64,
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            micro_batch: 64,
            accum_steps: 8,
            epochs: 10,
            word_ratio: 1.36,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.micro_batch == 0 || self.accum_steps == 0 {
            return bad("micro_batch and accum_steps must be at least 1");
        }
        if !(self.word_ratio > 0.0) {
            return bad("word_ratio must be positive");
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate for the optimizer step numbered `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            self.lr * step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub words_seen: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Position of the trainer at the start of the current accumulation group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerProgress {
    pub step: u64,
    /// Micro-batches consumed before the group started.
    pub micro_batches: u64,
    pub subwords: u64,
    pub schedule: ScheduleState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub threshold: u64,
    pub words_seen: u64,
    pub step: u64,
}

/// Written when training stops on a non-finite loss or gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortReport {
    pub step: u64,
    pub micro_batch: u64,
    pub batch_hash: String,
    pub parameter: Option<String>,
    #[serde(with = "lossy_float")]
    pub loss: f64,
}

/// JSON has no NaN or infinity; those are written as the strings
/// `"NaN"`, `"inf"` and `"-inf"`.
mod lossy_float {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_str(&x.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => s.parse().map_err(D::Error::custom),
        }
    }
}

pub struct Snapshot<'a, T> {
    pub params: &'a ParameterSet<T>,
    pub optimizer: &'a OptimizerState<T>,
    pub progress: TrainerProgress,
}

/// Receives training events. All methods default to no-ops.
pub trait TrainSink<T: Scalar> {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    fn on_milestone(&mut self, _milestone: &Milestone, _snapshot: &Snapshot<'_, T>) -> Result<()> {
        Ok(())
    }

    /// Called with the last parameters that were finite.
    fn on_abort(&mut self, _report: &AbortReport, _snapshot: &Snapshot<'_, T>) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl<T: Scalar> TrainSink<T> for NullSink {}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ParameterSet<T>,
    pub optimizer: OptimizerState<T>,
    pub progress: TrainerProgress,
    pub log: Vec<StepLog>,
}

struct Pending<T> {
    grads: ParameterSet<T>,
    loss: f64,
    count: usize,
}

pub fn batch_hash(batch: &Batch) -> String {
    let mut h = Sha256::new();
    for row in &batch.token_ids {
        for id in row {
            h.update(id.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub struct Trainer<'a, T: Scalar> {
    cfg: TrainConfig,
    tok: &'a Tokenizer,
    features: &'a FeatureStore,
    params: ParameterSet<T>,
    optimizer: OptimizerState<T>,
    progress: TrainerProgress,
    schedule: ScheduleState,
    subwords: u64,
    micro_batches: u64,
    pending: Option<Pending<T>>,
    feature_cache: HashMap<String, Vec<T>>,
    log: Vec<StepLog>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        params: ParameterSet<T>,
        cfg: TrainConfig,
        tok: &'a Tokenizer,
        features: &'a FeatureStore,
    ) -> Result<Self> {
        let optimizer = OptimizerState::new(&params);
        Self::resume(params, optimizer, TrainerProgress::default(), cfg, tok, features)
    }

    /// Continues from a saved state. The caller must skip the first
    /// `progress.micro_batches` batches of the data stream.
    pub fn resume(
        params: ParameterSet<T>,
        optimizer: OptimizerState<T>,
        progress: TrainerProgress,
        cfg: TrainConfig,
        tok: &'a Tokenizer,
        features: &'a FeatureStore,
    ) -> Result<Self> {
        cfg.validate()?;
        if tok.vocab_size() != params.config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer vocabulary {} differs from model vocab_size {}",
                tok.vocab_size(),
                params.config.vocab_size
            )));
        }
        let sp = tok.specials();
        if sp.img != params.config.img_token_id || sp.bos != params.config.bos_token_id {
            return Err(Error::Config(
                "tokenizer special ids differ from the model config".into(),
            ));
        }
        if features.dim() != params.config.feat_dim {
            return Err(Error::Config(format!(
                "feature dim {} differs from model feat_dim {}",
                features.dim(),
                params.config.feat_dim
            )));
        }
        Ok(Self {
            schedule: progress.schedule.clone(),
            subwords: progress.subwords,
            micro_batches: progress.micro_batches,
            cfg,
            tok,
            features,
            params,
            optimizer,
            progress,
            pending: None,
            feature_cache: HashMap::new(),
            log: Vec::new(),
        })
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn progress(&self) -> &TrainerProgress {
        &self.progress
    }

    pub fn words_seen(&self) -> u64 {
        self.schedule.words_seen
    }

    pub fn step(&self) -> u64 {
        self.progress.step
    }

    fn feature(&mut self, key: &str) -> Result<()> {
        if !self.feature_cache.contains_key(key) {
            let v = self.features.get(key)?.iter().map(|&x| T::of(x as f64)).collect();
            self.feature_cache.insert(key.to_string(), v);
        }
        Ok(())
    }

    fn snapshot(&self) -> Snapshot<'_, T> {
        let mut progress = self.progress.clone();
        progress.schedule.emitted = self.schedule.emitted.clone();
        Snapshot {
            params: &self.params,
            optimizer: &self.optimizer,
            progress,
        }
    }

    /// Processes one micro-batch; applies an optimizer step when the group is full.
    pub fn micro_step(&mut self, batch: &Batch, sink: &mut dyn TrainSink<T>) -> Result<()> {
        let pad = self.tok.specials().pad;
        for key in &batch.image_keys {
            self.feature(key)?;
        }
        let rows: Vec<Row<'_, T>> = batch
            .token_ids
            .iter()
            .zip(&batch.loss_mask)
            .zip(&batch.image_keys)
            .map(|((ids, mask), key)| {
                let len = ids.iter().rposition(|&id| id != pad).map_or(0, |i| i + 1);
                Row {
                    ids: &ids[..len],
                    mask: &mask[..len],
                    feature: Some(self.feature_cache[key].as_slice()),
                }
            })
            .collect();
        let lg = loss_and_grad(&self.params, &rows)?;

        let bad_param = lg.grads.first_non_finite().map(str::to_string);
        if !lg.loss.is_finite() || bad_param.is_some() {
            let report = AbortReport {
                step: self.progress.step,
                micro_batch: self.micro_batches,
                batch_hash: batch_hash(batch),
                parameter: bad_param,
                loss: lg.loss,
            };
            sink.on_abort(&report, &self.snapshot())?;
            return Err(Error::NonFinite(format!(
                "training loss at step {} (batch {})",
                report.step, report.batch_hash
            )));
        }

        match self.pending.as_mut() {
            Some(p) => {
                p.grads.add_scaled(&lg.grads, T::one());
                p.loss += lg.loss;
                p.count += 1;
            }
            None => {
                self.pending = Some(Pending {
                    grads: lg.grads,
                    loss: lg.loss,
                    count: 1,
                })
            }
        }

        self.micro_batches += 1;
        self.subwords += batch.subword_count(self.tok);
        let words = estimate_words(self.subwords, self.cfg.word_ratio);
        for threshold in self.schedule.advance(words)? {
            let m = Milestone {
                threshold,
                words_seen: words,
                step: self.progress.step,
            };
            sink.on_milestone(&m, &self.snapshot())?;
        }

        if self.pending.as_ref().is_some_and(|p| p.count == self.cfg.accum_steps) {
            self.apply_step(sink)?;
        }
        Ok(())
    }

    fn apply_step(&mut self, sink: &mut dyn TrainSink<T>) -> Result<()> {
        let Some(mut pending) = self.pending.take() else {
            return Ok(());
        };
        pending.grads.scale(T::of(1.0 / pending.count as f64));
        let step = self.progress.step + 1;
        let lr = self.cfg.lr_at(step);
        adamw_step(
            &mut self.params,
            &pending.grads,
            &mut self.optimizer,
            &self.cfg.adamw(),
            lr,
        )?;
        let entry = StepLog {
            step,
            words_seen: self.schedule.words_seen,
            loss: pending.loss / pending.count as f64,
            lr,
        };
        sink.on_step(&entry)?;
        self.log.push(entry);
        self.progress = TrainerProgress {
            step,
            micro_batches: self.micro_batches,
            subwords: self.subwords,
            schedule: self.schedule.clone(),
        };
        Ok(())
    }

    fn done(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.progress.step >= m)
    }

    /// Flushes a trailing partial group and returns the final state.
    pub fn finish(mut self, sink: &mut dyn TrainSink<T>) -> Result<TrainOutcome<T>> {
        if !self.done() {
            self.apply_step(sink)?;
        }
        Ok(TrainOutcome {
            params: self.params,
            optimizer: self.optimizer,
            progress: self.progress,
            log: self.log,
        })
    }

    pub fn run<I>(mut self, data: I, sink: &mut dyn TrainSink<T>) -> Result<TrainOutcome<T>>
    where
        I: IntoIterator<Item = Batch>,
    {
        for batch in data {
            if self.done() {
                break;
            }
            self.micro_step(&batch, sink)?;
        }
        self.finish(sink)
    }
}

/// Trains `params` on `data` from a fresh optimizer state.
pub fn train<T, I>(
    params: ParameterSet<T>,
    data: I,
    cfg: &TrainConfig,
    tok: &Tokenizer,
    features: &FeatureStore,
    sink: &mut dyn TrainSink<T>,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    I: IntoIterator<Item = Batch>,
{
    Trainer::new(params, cfg.clone(), tok, features)?.run(data, sink)
}
