//! Optimization: Adam, gradient clipping, checkpoints and the epoch loop.

mod adam;
pub mod checkpoint;

use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_gradients, AdamConfig, AdamState};
pub use checkpoint::RawCheckpoint;

use crate::bilm::{BiLm, BiLmMeta};
use crate::error::{Error, Result};
use crate::eval::evaluate_tags;
use crate::model::{Model, ModelMeta, PreparedSentence};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Global L2 norm bound.
    pub clip_norm: f64,
    pub max_epochs: usize,
    /// Epochs without strict dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 16,
            clip_norm: 1.0,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("training: {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience exceeds max_epochs");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training batch loss, dropout on.
    pub train_loss: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// The per-epoch callback asked to stop.
    Requested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Loop position: completed epochs, best so far and the shuffle stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_dev_f1: Option<f64>,
    /// Word position of the seeded shuffle/dropout generator.
    #[serde(with = "u128_text")]
    pub rng_word_pos: u128,
}

impl Progress {
    fn start() -> Self {
        Progress {
            epochs: Vec::new(),
            best_epoch: None,
            best_dev_f1: None,
            rng_word_pos: 0,
        }
    }

    pub fn completed(&self) -> usize {
        self.epochs.len()
    }
}

mod u128_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub adam: AdamState,
    pub progress: Progress,
}

/// A model plus, when saved from a training run, everything needed to
/// continue it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct TrainingMeta {
    config: TrainConfig,
    adam_step: u64,
    progress: Progress,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    model: ModelMeta,
    bilm: Option<BiLmMeta>,
    training: Option<TrainingMeta>,
}

fn meta_error(detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset: 0,
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn new(model: Model, config: TrainConfig) -> Self {
        let adam = AdamState::new(&model.params);
        Checkpoint {
            model,
            training: Some(TrainingState {
                config,
                adam,
                progress: Progress::start(),
            }),
        }
    }

    pub fn to_raw(&self) -> Result<RawCheckpoint> {
        let m = &self.model;
        let meta = CheckpointMeta {
            kind: "tagger".into(),
            model: m.meta(),
            bilm: m.bilm.as_ref().map(|b| b.meta()),
            training: self.training.as_ref().map(|t| TrainingMeta {
                config: t.config.clone(),
                adam_step: t.adam.step,
                progress: t.progress.clone(),
            }),
        };
        let metadata = serde_json::to_string(&meta).map_err(|e| meta_error(e.to_string()))?;
        let mut tensors: Vec<(String, Tensor)> = m
            .params
            .iter()
            .map(|p| (format!("param.{}", p.name), p.value.clone()))
            .collect();
        if let Some(t) = &self.training {
            for (p, (mm, vv)) in m.params.iter().zip(t.adam.m.iter().zip(&t.adam.v)) {
                tensors.push((format!("adam.m.{}", p.name), mm.clone()));
                tensors.push((format!("adam.v.{}", p.name), vv.clone()));
            }
        }
        if let Some(b) = &m.bilm {
            tensors.extend(b.named_tensors("bilm."));
        }
        Ok(RawCheckpoint { metadata, tensors })
    }

    pub fn from_raw(raw: &RawCheckpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&raw.metadata)
            .map_err(|e| meta_error(format!("tagger metadata: {e}")))?;
        if meta.kind != "tagger" {
            return Err(meta_error(format!("expected a tagger checkpoint, found `{}`", meta.kind)));
        }
        let bilm = match meta.bilm {
            Some(b) => Some(Arc::new(BiLm::from_parts(b, raw.with_prefix("bilm."))?)),
            None => None,
        };
        let model = Model::from_parts(meta.model, raw.with_prefix("param."), bilm)?;
        let training = match meta.training {
            None => None,
            Some(t) => {
                let mut adam = AdamState::new(&model.params);
                adam.step = t.adam_step;
                for (moment, prefix) in [(&mut adam.m, "adam.m."), (&mut adam.v, "adam.v.")] {
                    let mut store = model.params.clone();
                    crate::bilm::load_values(&mut store, raw.with_prefix(prefix), "optimizer")?;
                    *moment = store.iter().map(|p| p.value.clone()).collect();
                }
                Some(TrainingState {
                    config: t.config,
                    adam,
                    progress: t.progress,
                })
            }
        };
        Ok(Checkpoint { model, training })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_raw()?.to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_raw(&RawCheckpoint::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_raw()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(&RawCheckpoint::load(path)?)
    }
}

pub struct TrainOutcome {
    /// State at the best dev epoch.
    pub best: Checkpoint,
    /// State after the final epoch, for resuming.
    pub last: Checkpoint,
    pub report: TrainReport,
}

/// Dev micro-F1 of the model in evaluation mode.
pub fn dev_f1(model: &Model, dev: &[PreparedSentence]) -> Result<f64> {
    let pred = model.predict_all(dev)?;
    let gold: Vec<&[usize]> = dev.iter().map(|s| s.tags.as_slice()).collect();
    Ok(evaluate_tags(&gold, &pred, &model.scheme)?.micro_f1())
}

/// Trains from scratch with dev micro-F1 early stopping.
pub fn train(
    model: Model,
    train_set: &[PreparedSentence],
    dev: &[PreparedSentence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dev.is_empty() {
        return Err(Error::Data("development split is empty".into()));
    }
    let mut score = |m: &Model| dev_f1(m, dev);
    train_from(
        Checkpoint::new(model, config.clone()),
        None,
        train_set,
        &mut score,
        &mut |_, _| Ok(ControlFlow::Continue(())),
    )
}

/// Runs or resumes the epoch loop from `current`. `best` is the best
/// checkpoint seen so far when resuming. `score` rates the model after each
/// epoch; `on_epoch` sees the latest state and the best one and may end
/// the run early.
pub fn train_from(
    current: Checkpoint,
    best: Option<Checkpoint>,
    train_set: &[PreparedSentence],
    score: &mut dyn FnMut(&Model) -> Result<f64>,
    on_epoch: &mut dyn FnMut(&Checkpoint, &Checkpoint) -> Result<ControlFlow<()>>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if let Some(i) = train_set.iter().position(|s| s.is_empty() || s.tags.len() != s.len()) {
        return Err(Error::Data(format!("training sentence {i} is empty or untagged")));
    }
    let mut current = current;
    let Some(state) = current.training.as_ref() else {
        return Err(Error::Config("checkpoint carries no training state".into()));
    };
    let config = state.config.clone();
    config.validate()?;
    if state.progress.best_epoch.is_some() != best.is_some() {
        return Err(Error::Config("resuming needs both the latest and the best checkpoint".into()));
    }
    let mut best = best;
    let adam_cfg = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_word_pos(state.progress.rng_word_pos);
    let mut requested = false;

    loop {
        let state = current.training.as_ref().expect("training state");
        let progress = &state.progress;
        let done = progress.completed();
        let reason = if requested {
            Some(StopReason::Requested)
        } else {
            stop_reason(progress, &config)
        };
        if let Some(reason) = reason {
            let best = best.ok_or_else(|| Error::Config("no epoch was completed".into()))?;
            let report = TrainReport {
                epochs: progress.epochs.clone(),
                best_epoch: progress.best_epoch.expect("best epoch"),
                best_dev_f1: progress.best_dev_f1.expect("best score"),
                stop_reason: reason,
            };
            return Ok(TrainOutcome {
                best,
                last: current,
                report,
            });
        }

        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            let dropout_seed: u64 = rng.random();
            let batch: Vec<&PreparedSentence> = chunk.iter().map(|&i| &train_set[i]).collect();
            current.model.params.zero_grad();
            losses.push(current.model.accumulate_gradients(&batch, Some(dropout_seed))?);
            clip_gradients(&mut current.model.params, config.clip_norm);
            let state = current.training.as_mut().expect("training state");
            adam_step(&mut current.model.params, &mut state.adam, &adam_cfg)?;
        }
        current.model.params.zero_grad();
        let f1 = score(&current.model)?;
        let epoch = done + 1;
        let state = current.training.as_mut().expect("training state");
        let progress = &mut state.progress;
        progress.epochs.push(EpochRecord {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            dev_f1: f1,
        });
        progress.rng_word_pos = rng.get_word_pos();
        if progress.best_dev_f1.is_none_or(|b| f1 > b) {
            progress.best_epoch = Some(epoch);
            progress.best_dev_f1 = Some(f1);
            best = Some(current.clone());
        }
        requested = on_epoch(&current, best.as_ref().expect("best checkpoint"))?.is_break();
    }
}

/// Early stopping rule: stop once `patience` epochs pass without a strict
/// improvement, or at `max_epochs`.
fn stop_reason(progress: &Progress, config: &TrainConfig) -> Option<StopReason> {
    let done = progress.completed();
    if let Some(best) = progress.best_epoch {
        if done - best >= config.patience {
            return Some(StopReason::Patience);
        }
    }
    (done >= config.max_epochs).then_some(StopReason::MaxEpochs)
}
