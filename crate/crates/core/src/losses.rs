//! Duration losses, reconstruction and emotion-recognition terms, CCC, and
//! the weighted composite objective.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bounds on the predicted standard deviation of log durations.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("both inputs are constant and equal; CCC is undefined")]
    Undefined,
    #[error("loss weight {name} must be finite and non-negative, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), LossError> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(())
}

pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    check_pair(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

pub fn loss_abs(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    check_pair(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Clamps a log standard deviation into `[ln SIGMA_MIN, ln SIGMA_MAX]`.
pub fn clamp_log_sigma(log_sigma: f64) -> f64 {
    log_sigma.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln())
}

/// Gaussian negative log-likelihood of `target` under `N(mean, exp(log_sigma)^2)`,
/// averaged over positions.
pub fn loss_nll(mean: &[f64], log_sigma: &[f64], target: &[f64]) -> Result<f64, LossError> {
    check_pair(mean, target)?;
    check_pair(log_sigma, target)?;
    if log_sigma.iter().any(|s| !s.is_finite()) {
        return Err(LossError::NonFinite("log sigma"));
    }
    let s: f64 = mean
        .iter()
        .zip(log_sigma)
        .zip(target)
        .map(|((&m, &ls), &t)| nll_term(m, ls, t))
        .sum();
    Ok(s / mean.len() as f64)
}

fn nll_term(mean: f64, log_sigma: f64, target: f64) -> f64 {
    let ls = clamp_log_sigma(log_sigma);
    let r = target - mean;
    HALF_LN_2PI + ls + r * r * (-2.0 * ls).exp() / 2.0
}

/// Duration loss variant; one per predictor configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationLoss {
    Mse,
    L1,
    Nll,
}

/// Summed (not averaged) loss over positions with gradients, so batches of
/// different lengths can be combined and normalized by their total count.
#[derive(Debug, Clone, PartialEq)]
pub struct SummedLoss {
    pub sum: f64,
    pub grad_mean: Vec<f64>,
    /// Present for [`DurationLoss::Nll`] only.
    pub grad_log_sigma: Option<Vec<f64>>,
}

impl DurationLoss {
    pub fn summed(
        self,
        mean: &[f64],
        log_sigma: Option<&[f64]>,
        target: &[f64],
    ) -> Result<SummedLoss, LossError> {
        check_pair(mean, target)?;
        match self {
            DurationLoss::Mse => {
                let mut sum = 0.0;
                let grad = mean
                    .iter()
                    .zip(target)
                    .map(|(m, t)| {
                        let r = m - t;
                        sum += r * r;
                        2.0 * r
                    })
                    .collect();
                Ok(SummedLoss {
                    sum,
                    grad_mean: grad,
                    grad_log_sigma: None,
                })
            }
            DurationLoss::L1 => {
                let mut sum = 0.0;
                let grad = mean
                    .iter()
                    .zip(target)
                    .map(|(m, t)| {
                        let r = m - t;
                        sum += r.abs();
                        if r > 0.0 {
                            1.0
                        } else if r < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(SummedLoss {
                    sum,
                    grad_mean: grad,
                    grad_log_sigma: None,
                })
            }
            DurationLoss::Nll => {
                let log_sigma = log_sigma.ok_or(LossError::LengthMismatch(0, target.len()))?;
                check_pair(log_sigma, target)?;
                let mut sum = 0.0;
                let mut grad_mean = Vec::with_capacity(mean.len());
                let mut grad_ls = Vec::with_capacity(mean.len());
                for ((&m, &raw), &t) in mean.iter().zip(log_sigma).zip(target) {
                    if !raw.is_finite() {
                        return Err(LossError::NonFinite("log sigma"));
                    }
                    let ls = clamp_log_sigma(raw);
                    let inv_var = (-2.0 * ls).exp();
                    let r = t - m;
                    sum += HALF_LN_2PI + ls + r * r * inv_var / 2.0;
                    grad_mean.push(-r * inv_var);
                    let clamped = raw != ls;
                    grad_ls.push(if clamped { 0.0 } else { 1.0 - r * r * inv_var });
                }
                Ok(SummedLoss {
                    sum,
                    grad_mean,
                    grad_log_sigma: Some(grad_ls),
                })
            }
        }
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Concordance correlation coefficient with population moments.
///
/// Two constant inputs with different means give 0 (with a warning); two
/// constant equal inputs have no defined value and return an error.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64, LossError> {
    if x.len() != y.len() {
        return Err(LossError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(LossError::TooShort(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("ccc input"));
    }
    let (mx, vx) = moments(x);
    let (my, vy) = moments(y);
    let n = x.len() as f64;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    let denom = vx + vy + (mx - my).powi(2);
    if denom == 0.0 {
        return Err(LossError::Undefined);
    }
    if vx == 0.0 && vy == 0.0 {
        log::warn!("ccc: both inputs constant with different means ({mx} vs {my}); returning 0");
        return Ok(0.0);
    }
    Ok(2.0 * cov / denom)
}

/// `1 - ccc(e_true, e_pred)` over a batch of utterance-level arousal values.
pub fn loss_ser(e_true: &[f64], e_pred: &[f64]) -> Result<f64, LossError> {
    Ok(1.0 - ccc(e_true, e_pred)?)
}

/// Sum of `1 - ccc` over utterances, each given as frame-level
/// (reference, prediction) tracks.
pub fn loss_ser_per_utterance(tracks: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, LossError> {
    if tracks.is_empty() {
        return Err(LossError::Empty);
    }
    tracks.iter().map(|(t, p)| loss_ser(t, p)).sum()
}

/// Frames x mel-bins feature matrix computed outside this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != frames * bins {
            return Err(LossError::LengthMismatch(data.len(), frames * bins));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFinite("feature matrix"));
        }
        Ok(Self { frames, bins, data })
    }
}

/// L1 distance between two feature matrices of identical shape.
pub fn loss_recon(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64, LossError> {
    if (a.frames, a.bins) != (b.frames, b.bins) {
        return Err(LossError::ShapeMismatch((a.frames, a.bins), (b.frames, b.bins)));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    /// `lambda4 = 2`; the adversarial, reconstruction and SER weights are
    /// placeholders to be set by whoever supplies those terms.
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

/// Loss terms available for one step. Only the duration term is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub gan: Option<f64>,
    pub recon: Option<f64>,
    pub ser: Option<f64>,
    pub dur: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeLoss {
    pub total: f64,
    pub absent: Vec<String>,
}

pub fn loss_composite(parts: &LossParts, w: &LossWeights) -> Result<CompositeLoss, LossError> {
    w.validate()?;
    let mut absent = Vec::new();
    let mut term = |name: &str, value: Option<f64>, weight: f64| match value {
        Some(v) => weight * v,
        None => {
            absent.push(name.to_string());
            0.0
        }
    };
    let total = term("gan", parts.gan, w.lambda1)
        + term("recon", parts.recon, w.lambda2)
        + term("ser", parts.ser, w.lambda3)
        + w.lambda4 * parts.dur;
    if !total.is_finite() {
        return Err(LossError::NonFinite("composite loss"));
    }
    Ok(CompositeLoss { total, absent })
}
