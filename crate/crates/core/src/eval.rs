//! Emotion conversion of record durations and the per-arousal duration report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::UnitSequence;
use crate::corpus::{Corpus, CorpusError, UtteranceRecord};
use crate::embeddings::{ArousalLabel, SpeakerVector};
use crate::losses::{ccc, loss_abs, loss_mse, loss_nll, LossError};
use crate::predictor::{apply_durations, reverse_durations, DurationModel, PredictorError, ReverseMode, Variant};

/// Target arousal levels every report covers.
pub const AROUSAL_LEVELS: [u8; 7] = [1, 2, 3, 4, 5, 6, 7];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("record `{id}` uses unit {unit} but the model vocabulary is {vocabulary}")]
    VocabularyMismatch { id: String, unit: u32, vocabulary: usize },
    #[error("cannot evaluate an empty corpus")]
    Empty,
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub record_id: String,
    pub target_arousal: f64,
    pub source_seconds: f64,
    pub output_seconds: f64,
    pub output_frames: usize,
}

/// Re-times `record` for `target`: dedup, predict, reverse, expand.
pub fn convert_durations(
    model: &DurationModel,
    record: &UtteranceRecord,
    speaker: &SpeakerVector,
    target: ArousalLabel,
    mode: ReverseMode,
) -> Result<(UnitSequence, EvalRow), EvalError> {
    check_vocabulary(model, record)?;
    let runs = record.runs();
    let pred = model.predict(runs.units(), speaker, target)?;
    let durations = reverse_durations(&pred, mode)?;
    let mut seq = apply_durations(runs.units(), &durations)?;
    seq.frame_rate_hz = record.frame_rate_hz;
    let row = EvalRow {
        record_id: record.id.clone(),
        target_arousal: target.value(),
        source_seconds: record.seconds(),
        output_seconds: seq.seconds(),
        output_frames: seq.len(),
    };
    Ok((seq, row))
}

fn check_vocabulary(model: &DurationModel, record: &UtteranceRecord) -> Result<(), EvalError> {
    let vocabulary = model.config().vocabulary;
    match record.units.iter().find(|&&u| u as usize >= vocabulary) {
        Some(&unit) => Err(EvalError::VocabularyMismatch {
            id: record.id.clone(),
            unit,
            vocabulary,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArousalBin {
    pub arousal_level: u8,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationLosses {
    pub mse: f64,
    pub abs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub variant: Variant,
    pub reverse_mode: ReverseMode,
    pub vocabulary: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub n_records: usize,
    pub n_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Converted durations per target arousal level 1..=7.
    pub bins: Vec<ArousalBin>,
    /// Mean seconds at target 1 minus mean seconds at target 7.
    pub delta_1_7: f64,
    pub source_mean_seconds: f64,
    /// Mean converted seconds with each record's own arousal as target.
    pub self_mean_seconds: f64,
    /// Losses of predicted vs true log durations at the source arousal.
    pub losses: DurationLosses,
    pub ccc_log_durations: f64,
    /// Root-mean-square predicted sigma (uncertainty variant only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rms_sigma: Option<f64>,
    pub config: EvalConfigEcho,
    pub seed: u64,
}

impl EvalReport {
    pub fn bin(&self, level: u8) -> Option<&ArousalBin> {
        self.bins.iter().find(|b| b.arousal_level == level)
    }

    pub fn means(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.mean_seconds).collect()
    }

    /// `arousal_level,mean_seconds,std_seconds` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arousal_level,mean_seconds,std_seconds\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{}\n", b.arousal_level, b.mean_seconds, b.std_seconds));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "variant {}  records {}  units {}\n",
            self.config.variant, self.config.n_records, self.config.n_units
        );
        out.push_str("arousal  mean_s    std_s\n");
        for b in &self.bins {
            out.push_str(&format!("{:>7}  {:>7.4}  {:>7.4}\n", b.arousal_level, b.mean_seconds, b.std_seconds));
        }
        out.push_str(&format!("delta_1_7 {:.4} s\n", self.delta_1_7));
        out.push_str(&format!(
            "source {:.4} s  self {:.4} s\n",
            self.source_mean_seconds, self.self_mean_seconds
        ));
        out.push_str(&format!("mse {:.5}  abs {:.5}", self.losses.mse, self.losses.abs));
        if let Some(nll) = self.losses.nll {
            out.push_str(&format!("  nll {nll:.5}"));
        }
        out.push_str(&format!("  ccc {:.5}\n", self.ccc_log_durations));
        if let Some(s) = self.rms_sigma {
            out.push_str(&format!("rms_sigma {s:.5}\n"));
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Converts every record to each arousal level 1..=7 and aggregates in
/// record order.
pub fn evaluate(model: &DurationModel, corpus: &Corpus, mode: ReverseMode, seed: u64) -> Result<EvalReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut per_level: Vec<Vec<f64>> = vec![Vec::with_capacity(corpus.len()); AROUSAL_LEVELS.len()];
    let mut source = Vec::with_capacity(corpus.len());
    let mut own = Vec::with_capacity(corpus.len());
    let mut mean = Vec::new();
    let mut log_sigma = Vec::new();
    let mut target = Vec::new();
    for record in corpus.records() {
        let speaker = corpus.speaker_vector(record)?;
        for (slot, &level) in per_level.iter_mut().zip(&AROUSAL_LEVELS) {
            let label = ArousalLabel::new(level as f64).expect("level in range");
            let (_, row) = convert_durations(model, record, speaker, label, mode)?;
            slot.push(row.output_seconds);
        }
        let (_, row) = convert_durations(model, record, speaker, record.arousal, mode)?;
        own.push(row.output_seconds);
        source.push(record.seconds());

        let runs = record.runs();
        let pred = model.predict(runs.units(), speaker, record.arousal)?;
        mean.extend(pred.log_durations);
        if let Some(ls) = pred.log_sigma {
            log_sigma.extend(ls);
        }
        target.extend(runs.log_durations());
    }

    let bins: Vec<ArousalBin> = AROUSAL_LEVELS
        .iter()
        .zip(&per_level)
        .map(|(&level, secs)| {
            let (m, s) = mean_std(secs);
            ArousalBin {
                arousal_level: level,
                mean_seconds: m,
                std_seconds: s,
                n: secs.len(),
            }
        })
        .collect();
    let delta_1_7 = bins[0].mean_seconds - bins[bins.len() - 1].mean_seconds;
    let uncert = model.variant() == Variant::Uncert;
    let losses = DurationLosses {
        mse: loss_mse(&mean, &target)?,
        abs: loss_abs(&mean, &target)?,
        nll: uncert.then(|| loss_nll(&mean, &log_sigma, &target)).transpose()?,
    };
    // Constant predictions or targets leave CCC undefined; report 0 agreement.
    let ccc_log_durations = ccc(&mean, &target).unwrap_or(0.0);
    let rms_sigma = uncert.then(|| {
        (log_sigma.iter().map(|l| (2.0 * l).exp()).sum::<f64>() / log_sigma.len() as f64).sqrt()
    });
    let cfg = model.config();
    Ok(EvalReport {
        bins,
        delta_1_7,
        source_mean_seconds: mean_std(&source).0,
        self_mean_seconds: mean_std(&own).0,
        losses,
        ccc_log_durations,
        rms_sigma,
        config: EvalConfigEcho {
            variant: model.variant(),
            reverse_mode: mode,
            vocabulary: cfg.vocabulary,
            embed_dim: cfg.embed_dim,
            hidden: cfg.hidden,
            kernel_size: cfg.kernel_size,
            n_records: corpus.len(),
            n_units: target.len(),
        },
        seed,
    })
}
