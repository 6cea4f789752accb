//! Emotion- and speaker-conditioned duration modeling over discrete speech units.

pub mod codec;
pub mod corpus;
pub mod embeddings;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod predictor;
pub mod train;

pub use codec::{dedup, expand, RunLengthSequence, UnitId, UnitSequence, DEFAULT_FRAME_RATE_HZ};
pub use corpus::{generate, split, Corpus, GeneratorConfig, SplitRatios, UtteranceRecord};
pub use embeddings::{ArousalLabel, EmotionEmbedding, SpeakerVector};
pub use eval::{convert_durations, evaluate, EvalReport};
pub use losses::{ccc, loss_composite, LossWeights};
pub use numerics::{ParamStore, Tape, Tensor2D};
pub use predictor::{reverse_durations, DurationModel, DurationPrediction, ModelConfig, ReverseMode, Variant};
pub use train::{train, TrainConfig, TrainLog};
