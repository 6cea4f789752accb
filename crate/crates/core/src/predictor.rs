//! Duration predictor: unit lookup, conditioning broadcast, two same-length
//! convolutions with ReLU, and a linear head emitting log durations (plus a
//! log standard deviation for the uncertainty variant).

use std::cell::Cell;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, UnitSequence};
use crate::embeddings::{
    self, ArousalLabel, EmbeddingError, SpeakerVector, CONDITION_DIM, DEFAULT_UNIT_EMBED_DIM,
    EMOTION_DIM,
};
use crate::losses::{clamp_log_sigma, DurationLoss};
use crate::numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor2D, Var};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("unknown reverse mode `{0}` (expected `corrected` or `literal`)")]
    UnknownMode(String),
    #[error("unknown variant `{0}` (expected `mse`, `l1` or `uncert`)")]
    UnknownVariant(String),
    #[error("non-finite prediction at position {0}")]
    NonFinitePrediction(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mse,
    L1,
    Uncert,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mse, Variant::L1, Variant::Uncert];

    pub fn loss(self) -> DurationLoss {
        match self {
            Variant::Mse => DurationLoss::Mse,
            Variant::L1 => DurationLoss::L1,
            Variant::Uncert => DurationLoss::Nll,
        }
    }

    pub fn head_width(self) -> usize {
        match self {
            Variant::Uncert => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mse => "mse",
            Variant::L1 => "l1",
            Variant::Uncert => "uncert",
        })
    }
}

impl FromStr for Variant {
    type Err = PredictorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Variant::Mse),
            "l1" | "abs" => Ok(Variant::L1),
            "uncert" | "nll" => Ok(Variant::Uncert),
            _ => Err(PredictorError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocabulary: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocabulary: 100,
            embed_dim: DEFAULT_UNIT_EMBED_DIM,
            hidden: 256,
            kernel_size: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.vocabulary == 0 || self.embed_dim == 0 || self.hidden == 0 {
            return Err(PredictorError::Config(
                "vocabulary, embed_dim and hidden must be positive".into(),
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(PredictorError::Config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    fn param_shapes(&self, variant: Variant) -> Vec<(&'static str, Vec<usize>)> {
        let (v, e, h, k) = (self.vocabulary, self.embed_dim, self.hidden, self.kernel_size);
        vec![
            (names::UNIT_TABLE, vec![v, e]),
            (names::EMOTION_WEIGHT, vec![EMOTION_DIM]),
            (names::EMOTION_BIAS, vec![EMOTION_DIM]),
            (names::CONV1_KERNEL, vec![k, e + CONDITION_DIM, h]),
            (names::CONV1_BIAS, vec![h]),
            (names::CONV2_KERNEL, vec![k, h, h]),
            (names::CONV2_BIAS, vec![h]),
            (names::HEAD_WEIGHT, vec![h, variant.head_width()]),
            (names::HEAD_BIAS, vec![variant.head_width()]),
        ]
    }
}

pub mod names {
    pub const UNIT_TABLE: &str = "unit_table";
    pub const EMOTION_WEIGHT: &str = "emotion.weight";
    pub const EMOTION_BIAS: &str = "emotion.bias";
    pub const CONV1_KERNEL: &str = "conv1.kernel";
    pub const CONV1_BIAS: &str = "conv1.bias";
    pub const CONV2_KERNEL: &str = "conv2.kernel";
    pub const CONV2_BIAS: &str = "conv2.bias";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    unit_table: ParamId,
    emotion_weight: ParamId,
    emotion_bias: ParamId,
    conv1_kernel: ParamId,
    conv1_bias: ParamId,
    conv2_kernel: ParamId,
    conv2_bias: ParamId,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl Ids {
    fn resolve(store: &ParamStore) -> Result<Self, NumericsError> {
        Ok(Self {
            unit_table: store.id(names::UNIT_TABLE)?,
            emotion_weight: store.id(names::EMOTION_WEIGHT)?,
            emotion_bias: store.id(names::EMOTION_BIAS)?,
            conv1_kernel: store.id(names::CONV1_KERNEL)?,
            conv1_bias: store.id(names::CONV1_BIAS)?,
            conv2_kernel: store.id(names::CONV2_KERNEL)?,
            conv2_bias: store.id(names::CONV2_BIAS)?,
            head_weight: store.id(names::HEAD_WEIGHT)?,
            head_bias: store.id(names::HEAD_BIAS)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationModel {
    config: ModelConfig,
    variant: Variant,
    params: ParamStore,
    ids: Ids,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationPrediction {
    pub log_durations: Vec<f64>,
    pub log_sigma: Option<Vec<f64>>,
}

impl DurationPrediction {
    pub fn len(&self) -> usize {
        self.log_durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_durations.is_empty()
    }

    pub fn sigma(&self) -> Option<Vec<f64>> {
        self.log_sigma
            .as_ref()
            .map(|ls| ls.iter().map(|v| v.exp()).collect())
    }
}

impl DurationModel {
    /// Randomly initialized model (He-style scaling for the convolutions).
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self, PredictorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in config.param_shapes(variant) {
            let n: usize = shape.iter().product();
            let std = match name {
                names::UNIT_TABLE => 1.0,
                names::EMOTION_WEIGHT => 0.25,
                names::CONV1_KERNEL => (2.0 / (config.kernel_size * (config.embed_dim + CONDITION_DIM)) as f64).sqrt(),
                names::CONV2_KERNEL => (2.0 / (config.kernel_size * config.hidden) as f64).sqrt(),
                names::HEAD_WEIGHT => (1.0 / config.hidden as f64).sqrt(),
                _ => 0.0,
            };
            let values = if std == 0.0 {
                vec![0.0; n]
            } else {
                let dist = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            store.add(name, shape, values)?;
        }
        Self::from_store(config, variant, store)
    }

    /// All-zero parameters: every prediction equals the head bias.
    pub fn zeros(config: ModelConfig, variant: Variant) -> Result<Self, PredictorError> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape) in config.param_shapes(variant) {
            let n = shape.iter().product();
            store.add(name, shape, vec![0.0; n])?;
        }
        Self::from_store(config, variant, store)
    }

    fn from_store(config: ModelConfig, variant: Variant, store: ParamStore) -> Result<Self, PredictorError> {
        for (name, shape) in config.param_shapes(variant) {
            let id = store.id(name)?;
            if store.shape(id) != shape.as_slice() {
                return Err(PredictorError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    store.shape(id)
                )));
            }
        }
        if store.len() != config.param_shapes(variant).len() {
            return Err(PredictorError::Checkpoint("unexpected extra parameters".into()));
        }
        let ids = Ids::resolve(&store)?;
        Ok(Self {
            config,
            variant,
            params: store,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets the head bias for the log-duration output.
    pub fn set_mean_bias(&mut self, value: f64) {
        self.params.value_mut(self.ids.head_bias)[0] = value;
    }

    /// Records the forward pass and returns the `U x head_width` head output.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        units: &[u32],
        speaker: &SpeakerVector,
        label: ArousalLabel,
    ) -> Result<Var, PredictorError> {
        codec::validate_ids(units, self.config.vocabulary)?;
        codec::check_no_consecutive_duplicates(units)?;
        let ids = &self.ids;
        let x = embeddings::units_on_tape(tape, store, ids.unit_table, units)?;
        let zs = tape.input(Tensor2D::row_vector(speaker.values().to_vec())?);
        let ze = embeddings::emotion_on_tape(tape, store, ids.emotion_weight, ids.emotion_bias, label)?;
        let cond = tape.concat_cols(&[zs, ze])?;
        let h = tape.conv1d_broadcast(store, x, cond, ids.conv1_kernel, ids.conv1_bias)?;
        let h = tape.relu(h)?;
        let h = tape.conv1d(store, h, ids.conv2_kernel, ids.conv2_bias)?;
        let h = tape.relu(h)?;
        Ok(tape.linear(store, h, ids.head_weight, ids.head_bias)?)
    }

    /// Same network with the broadcast columns materialized before the first
    /// convolution. Slower; kept to cross-check the fused path.
    pub fn forward_reference(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        units: &[u32],
        speaker: &SpeakerVector,
        label: ArousalLabel,
    ) -> Result<Var, PredictorError> {
        codec::validate_ids(units, self.config.vocabulary)?;
        codec::check_no_consecutive_duplicates(units)?;
        let ids = &self.ids;
        let x = embeddings::units_on_tape(tape, store, ids.unit_table, units)?;
        let zs = tape.input(Tensor2D::row_vector(speaker.values().to_vec())?);
        let ze = embeddings::emotion_on_tape(tape, store, ids.emotion_weight, ids.emotion_bias, label)?;
        let cat = tape.broadcast_concat(x, &[zs, ze])?;
        let h = tape.conv1d(store, cat, ids.conv1_kernel, ids.conv1_bias)?;
        let h = tape.relu(h)?;
        let h = tape.conv1d(store, h, ids.conv2_kernel, ids.conv2_bias)?;
        let h = tape.relu(h)?;
        Ok(tape.linear(store, h, ids.head_weight, ids.head_bias)?)
    }

    /// Splits a head output into the prediction record.
    pub fn split_head(&self, head: &Tensor2D) -> Result<DurationPrediction, PredictorError> {
        let log_durations = head.column_values(0);
        if let Some(i) = log_durations.iter().position(|v| !v.is_finite()) {
            return Err(PredictorError::NonFinitePrediction(i));
        }
        let log_sigma = (self.variant == Variant::Uncert)
            .then(|| head.column_values(1).into_iter().map(clamp_log_sigma).collect());
        Ok(DurationPrediction {
            log_durations,
            log_sigma,
        })
    }

    /// Predicts log durations for de-duplicated `units`.
    pub fn predict(
        &self,
        units: &[u32],
        speaker: &SpeakerVector,
        label: ArousalLabel,
    ) -> Result<DurationPrediction, PredictorError> {
        let mut tape = Tape::new();
        let head = self.forward_on_tape(&mut tape, &self.params, units, speaker, label)?;
        self.split_head(tape.value(head))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let parameters = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    ParamEntry {
                        shape: p.shape.clone(),
                        data: p.value.clone(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            hyperparams: self.config,
            variant: self.variant,
            parameters,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, PredictorError> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(PredictorError::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        ckpt.hyperparams.validate()?;
        let mut store = ParamStore::new();
        for (name, entry) in ckpt.parameters {
            store.add(name, entry.shape, entry.data)?;
        }
        Self::from_store(ckpt.hyperparams, ckpt.variant, store)
    }

    pub fn to_json(&self) -> Result<String, PredictorError> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self, PredictorError> {
        Self::from_checkpoint(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PredictorError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PredictorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub hyperparams: ModelConfig,
    pub variant: Variant,
    pub parameters: IndexMap<String, ParamEntry>,
}

/// How predicted log durations are turned back into frame counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseMode {
    /// `max(1, round(exp(y)))`.
    #[default]
    Corrected,
    /// `min(1, exp(y + 1))`, raised to at least one frame.
    /// Every output is 1.
    Literal,
}

impl FromStr for ReverseMode {
    type Err = PredictorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "corrected" => Ok(ReverseMode::Corrected),
            "literal" => Ok(ReverseMode::Literal),
            _ => Err(PredictorError::UnknownMode(s.to_string())),
        }
    }
}

thread_local! {
    static REVERSE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`reverse_durations`] calls made on the current thread.
///
/// Training snapshots this counter to prove it never consumes predicted
/// durations.
pub fn reverse_call_count() -> u64 {
    REVERSE_CALLS.with(|c| c.get())
}

pub fn reverse_durations(
    pred: &DurationPrediction,
    mode: ReverseMode,
) -> Result<Vec<u32>, PredictorError> {
    REVERSE_CALLS.with(|c| c.set(c.get() + 1));
    pred.log_durations
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if !y.is_finite() {
                return Err(PredictorError::NonFinitePrediction(i));
            }
            let frames = match mode {
                ReverseMode::Corrected => y.exp().round().max(1.0),
                ReverseMode::Literal => (y + 1.0).exp().min(1.0).ceil().max(1.0),
            };
            // saturating float-to-int conversion
            Ok(frames as u32)
        })
        .collect()
}

/// Expands de-duplicated units by predicted durations.
pub fn apply_durations(units: &[u32], durations: &[u32]) -> Result<UnitSequence, PredictorError> {
    Ok(codec::expand_checked(units, durations)?)
}
