//! Mini-batch Adam training of a [`DurationModel`] against ground-truth
//! log durations, with early stopping on a validation split.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, Corpus, CorpusError, SplitRatios};
use crate::embeddings::{ArousalLabel, SpeakerVector};
use crate::losses::{loss_abs, loss_mse, loss_nll, LossError, LossWeights};
use crate::numerics::{ParamStore, Tape, Tensor2D};
use crate::predictor::{self, names, DurationModel, ModelConfig, PredictorError, Variant};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    Empty,
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error("training consumed predicted durations ({0} reverse_durations calls)")]
    ResynthesisContract(u64),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Seeds weight init, the train/val split and batch order.
    pub seed: u64,
    pub patience: usize,
    /// Share of the corpus held out for early stopping. Zero validates on
    /// the training records.
    pub val_fraction: f64,
    pub loss_weights: LossWeights,
    /// Start the log-duration head bias at the mean training target.
    pub init_bias_to_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mse,
            model: ModelConfig::default(),
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            patience: 10,
            val_fraction: 0.1,
            loss_weights: LossWeights::default(),
            init_bias_to_mean: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        self.loss_weights.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub split: String,
    /// Mean per-unit loss of the trained variant.
    pub dur: f64,
    /// `lambda4 * dur`, the optimized objective.
    pub objective: f64,
    pub mse: f64,
    pub abs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub reverse_calls: u64,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String, TrainError> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn val_at(&self, epoch: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.epoch == epoch && e.split == "val")
            .map(|e| e.dur)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DurationModel,
    pub log: TrainLog,
}

/// A de-duplicated training example.
struct Example<'a> {
    units: Vec<u32>,
    targets: Vec<f64>,
    speaker: &'a SpeakerVector,
    label: ArousalLabel,
}

fn examples(corpus: &Corpus) -> Result<Vec<Example<'_>>, TrainError> {
    corpus
        .records()
        .iter()
        .map(|r| {
            let runs = r.runs();
            Ok(Example {
                targets: runs.log_durations(),
                units: runs.units().to_vec(),
                speaker: corpus.speaker_vector(r)?,
                label: r.arousal,
            })
        })
        .collect()
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(store: &ParamStore, lr: f64, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn update(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p.value[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
            }
        }
    }
}

/// Splits `corpus` by `cfg.val_fraction` and trains on the larger part.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Empty);
    }
    if cfg.val_fraction == 0.0 {
        return train_split(corpus, corpus, cfg);
    }
    let s = corpus::split(
        corpus,
        SplitRatios::new(1.0 - cfg.val_fraction, cfg.val_fraction, 0.0),
        cfg.seed,
    )?;
    let val = if s.val.is_empty() { &s.train } else { &s.val };
    train_split(&s.train, val, cfg)
}

/// Trains on `train`, selecting the checkpoint with the lowest loss on `val`.
pub fn train_split(train: &Corpus, val: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Empty);
    }
    for c in [train, val] {
        if c.vocabulary() > cfg.model.vocabulary {
            return Err(TrainError::Config(format!(
                "corpus vocabulary {} exceeds model vocabulary {}",
                c.vocabulary(),
                cfg.model.vocabulary
            )));
        }
    }
    let reverse_before = predictor::reverse_call_count();

    let train_ex = examples(train)?;
    let val_ex = examples(val)?;
    let mut model = DurationModel::new(cfg.model, cfg.variant, cfg.seed)?;
    if cfg.init_bias_to_mean {
        let all: Vec<f64> = train_ex.iter().flat_map(|e| e.targets.iter().copied()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        model.set_mean_bias(mean);
        if cfg.variant == Variant::Uncert {
            let std = (all.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
            let id = model.params().id(names::HEAD_BIAS).map_err(PredictorError::from)?;
            model.params_mut().value_mut(id)[1] = std.max(1e-3).ln();
        }
    }

    let lambda = cfg.loss_weights.lambda4;
    let mut entries = Vec::new();
    let initial_train = measure(&model, &train_ex, 0, "train", lambda)?;
    let initial_val = measure(&model, &val_ex, 0, "val", lambda)?;
    let mut best_val = initial_val.dur;
    let mut best = model.clone();
    let mut best_epoch = 0;
    entries.push(initial_train);
    entries.push(initial_val);

    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut since_best = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_units = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (sum, units) = step(&mut model, &train_ex, batch, lambda).map_err(|e| diverged(epoch, b, e))?;
            adam.update(model.params_mut());
            if !model.params().all_finite() {
                return Err(diverged(epoch, b, "non-finite parameters after update"));
            }
            epoch_sum += sum;
            epoch_units += units;
        }
        epochs_run = epoch;
        let train_dur = epoch_sum / epoch_units as f64;
        let mut train_entry = measure(&model, &train_ex, epoch, "train", lambda)?;
        train_entry.dur = train_dur;
        train_entry.objective = lambda * train_dur;
        let val_entry = measure(&model, &val_ex, epoch, "val", lambda)?;
        if !val_entry.dur.is_finite() {
            return Err(diverged(epoch, 0, "non-finite validation loss"));
        }
        let improved = val_entry.dur < best_val;
        entries.push(train_entry);
        entries.push(val_entry.clone());
        log::debug!("epoch {epoch}: train {train_dur:.5} val {:.5}", val_entry.dur);
        if improved {
            best_val = val_entry.dur;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let reverse_calls = predictor::reverse_call_count() - reverse_before;
    if reverse_calls != 0 {
        return Err(TrainError::ResynthesisContract(reverse_calls));
    }
    Ok(TrainOutcome {
        model: best,
        log: TrainLog {
            entries,
            best_epoch,
            best_val,
            epochs_run,
            reverse_calls,
        },
    })
}

fn diverged(epoch: usize, batch: usize, detail: impl ToString) -> TrainError {
    TrainError::Diverged {
        epoch,
        batch,
        detail: detail.to_string(),
    }
}

/// Accumulates gradients of the batch objective into the model and returns
/// the summed loss and unit count. The objective is the per-unit mean over
/// every position in the batch.
fn step(model: &mut DurationModel, data: &[Example], batch: &[usize], lambda: f64) -> Result<(f64, usize), String> {
    let loss = model.variant().loss();
    let width = model.variant().head_width();
    let positions: usize = batch.iter().map(|&i| data[i].units.len()).sum();
    let scale = lambda / positions as f64;
    let mut store = std::mem::take(model.params_mut());
    store.zero_grad();
    let mut total = 0.0;
    let result = (|| -> Result<(), String> {
        for &i in batch {
            let ex = &data[i];
            let mut tape = Tape::new();
            let head = model
                .forward_on_tape(&mut tape, &store, &ex.units, ex.speaker, ex.label)
                .map_err(|e| e.to_string())?;
            let out = tape.value(head);
            let mean = out.column_values(0);
            let log_sigma = (width == 2).then(|| out.column_values(1));
            let s = loss
                .summed(&mean, log_sigma.as_deref(), &ex.targets)
                .map_err(|e| e.to_string())?;
            if !s.sum.is_finite() {
                return Err(format!("non-finite loss on example {i}"));
            }
            let u = ex.units.len();
            let mut grad = vec![0.0; u * width];
            for r in 0..u {
                grad[r * width] = s.grad_mean[r] * scale;
                if let Some(gs) = &s.grad_log_sigma {
                    grad[r * width + 1] = gs[r] * scale;
                }
            }
            let grad = Tensor2D::new(u, width, grad).map_err(|e| e.to_string())?;
            let l = tape.loss(head, s.sum * scale, grad).map_err(|e| e.to_string())?;
            tape.backward(l, &mut store).map_err(|e| e.to_string())?;
            total += s.sum;
        }
        Ok(())
    })();
    *model.params_mut() = store;
    result.map(|_| (total, positions))
}

fn measure(model: &DurationModel, data: &[Example], epoch: usize, split: &str, lambda: f64) -> Result<LogEntry, TrainError> {
    let mut mean = Vec::new();
    let mut log_sigma = Vec::new();
    let mut target = Vec::new();
    for ex in data {
        let p = model.predict(&ex.units, ex.speaker, ex.label)?;
        mean.extend(p.log_durations);
        if let Some(ls) = p.log_sigma {
            log_sigma.extend(ls);
        }
        target.extend_from_slice(&ex.targets);
    }
    let mse = loss_mse(&mean, &target)?;
    let abs = loss_abs(&mean, &target)?;
    let nll = (model.variant() == Variant::Uncert)
        .then(|| loss_nll(&mean, &log_sigma, &target))
        .transpose()?;
    let dur = match model.variant() {
        Variant::Mse => mse,
        Variant::L1 => abs,
        Variant::Uncert => nll.unwrap_or(f64::NAN),
    };
    Ok(LogEntry {
        epoch,
        split: split.to_string(),
        dur,
        objective: lambda * dur,
        mse,
        abs,
        nll,
    })
}
