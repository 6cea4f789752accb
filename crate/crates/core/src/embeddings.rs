//! Conditioning representations: unit lookup embeddings, the speaker
//! d-vector, and the linear emotion embedding of the arousal label.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor2D, Var};

pub const SPEAKER_DIM: usize = 512;
pub const EMOTION_DIM: usize = 128;
pub const DEFAULT_UNIT_EMBED_DIM: usize = 128;
/// Width of the broadcast conditioning block appended to each unit row.
pub const CONDITION_DIM: usize = SPEAKER_DIM + EMOTION_DIM;

pub const AROUSAL_MIN: f64 = 1.0;
pub const AROUSAL_MAX: f64 = 7.0;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("arousal {0} is outside [1, 7]")]
    ArousalOutOfRange(f64),
    #[error("{what} must have length {expected}, got {actual}")]
    WrongLength {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("unit id {id} outside vocabulary of size {vocabulary}")]
    OutOfVocabulary { id: u32, vocabulary: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Arousal on the 1–7 annotation scale.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ArousalLabel(f64);

impl ArousalLabel {
    pub fn new(value: f64) -> Result<Self, EmbeddingError> {
        if (AROUSAL_MIN..=AROUSAL_MAX).contains(&value) {
            Ok(Self(value))
        } else {
            Err(EmbeddingError::ArousalOutOfRange(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ArousalLabel {
    type Error = EmbeddingError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ArousalLabel> for f64 {
    fn from(label: ArousalLabel) -> f64 {
        label.0
    }
}

/// Speaker d-vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SpeakerVector(Vec<f64>);

impl SpeakerVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_vector("speaker vector", &values, SPEAKER_DIM)?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for SpeakerVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<SpeakerVector> for Vec<f64> {
    fn from(v: SpeakerVector) -> Vec<f64> {
        v.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionEmbedding(Vec<f64>);

impl EmotionEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        check_vector("emotion embedding", &values, EMOTION_DIM)?;
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn check_vector(what: &'static str, values: &[f64], expected: usize) -> Result<(), EmbeddingError> {
    if values.len() != expected {
        return Err(EmbeddingError::WrongLength {
            what,
            expected,
            actual: values.len(),
        });
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(what));
    }
    Ok(())
}

/// `z_e[j] = label * weights[j] + bias[j]`.
pub fn embed_emotion(
    label: ArousalLabel,
    weights: &[f64],
    bias: &[f64],
) -> Result<EmotionEmbedding, EmbeddingError> {
    check_vector("emotion weights", weights, EMOTION_DIM)?;
    check_vector("emotion bias", bias, EMOTION_DIM)?;
    let values = weights
        .iter()
        .zip(bias)
        .map(|(w, b)| label.value() * w + b)
        .collect();
    EmotionEmbedding::new(values)
}

/// Gathers rows of the `[V, E]` table `table` for each unit id.
pub fn embed_units(units: &[u32], table: &[f64], embed_dim: usize) -> Result<Tensor2D, EmbeddingError> {
    if embed_dim == 0 || !table.len().is_multiple_of(embed_dim) {
        return Err(EmbeddingError::WrongLength {
            what: "unit table",
            expected: embed_dim,
            actual: table.len(),
        });
    }
    let vocabulary = table.len() / embed_dim;
    let mut data = Vec::with_capacity(units.len() * embed_dim);
    for &id in units {
        let i = id as usize;
        if i >= vocabulary {
            return Err(EmbeddingError::OutOfVocabulary { id, vocabulary });
        }
        data.extend_from_slice(&table[i * embed_dim..(i + 1) * embed_dim]);
    }
    Ok(Tensor2D::new(units.len(), embed_dim, data)?)
}

/// Appends `[z_s ‖ z_e]` to every row of `unit_emb`.
pub fn broadcast_concat(
    unit_emb: &Tensor2D,
    speaker: &SpeakerVector,
    emotion: &EmotionEmbedding,
) -> Tensor2D {
    let cols = unit_emb.cols() + CONDITION_DIM;
    let mut data = Vec::with_capacity(unit_emb.rows() * cols);
    for r in 0..unit_emb.rows() {
        data.extend_from_slice(unit_emb.row(r));
        data.extend_from_slice(speaker.values());
        data.extend_from_slice(emotion.values());
    }
    Tensor2D::new(unit_emb.rows(), cols, data).expect("finite inputs")
}

/// Tape form of [`embed_emotion`] over stored `[128]` weight and bias.
pub fn emotion_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    weights: ParamId,
    bias: ParamId,
    label: ArousalLabel,
) -> Result<Var, NumericsError> {
    let w = tape.param(store, weights, 1, EMOTION_DIM)?;
    let b = tape.param(store, bias, 1, EMOTION_DIM)?;
    tape.scale_shift(w, b, label.value())
}

/// Tape form of [`embed_units`].
pub fn units_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    table: ParamId,
    units: &[u32],
) -> Result<Var, EmbeddingError> {
    let vocabulary = store.shape(table)[0];
    if let Some(&id) = units.iter().find(|&&id| id as usize >= vocabulary) {
        return Err(EmbeddingError::OutOfVocabulary { id, vocabulary });
    }
    let ids: Vec<usize> = units.iter().map(|&u| u as usize).collect();
    Ok(tape.gather(store, table, &ids)?)
}
