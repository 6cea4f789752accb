//! Utterance corpora: JSON-lines ingestion, a seeded synthetic generator
//! with a planted arousal/duration relation, and speaker-stratified splits.
//!
//! File layout (optionally gzip-compressed when the path ends in `.gz`):
//!
//! ```text
//! {"format_version":1,"vocabulary":100,"frame_rate_hz":49.0,"speakers":{...},"generator":{...}}
//! {"id":"utt000000","units":[3,3,17,...],"arousal":4.2,"speaker_id":"spk000",...}
//! ...
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, RunLengthSequence, UnitId, DEFAULT_FRAME_RATE_HZ};
use crate::embeddings::{ArousalLabel, SpeakerVector, AROUSAL_MAX, AROUSAL_MIN, SPEAKER_DIM};
use crate::losses::FeatureMatrix;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Arousal value at which the planted duration equals the base duration.
pub const AROUSAL_CENTER: f64 = 4.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed input: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate record id `{id}`")]
    DuplicateId { id: String, line: usize },
    #[error("record `{id}`: {message}")]
    Invalid { id: String, message: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("unsupported corpus format_version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("corpus is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format_version: u32,
    pub vocabulary: usize,
    pub frame_rate_hz: f64,
    /// Speaker vectors shared by all records of a speaker.
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub speakers: IndexMap<String, SpeakerVector>,
    /// Present for synthetic corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Provenance>,
}

impl CorpusHeader {
    pub fn new(vocabulary: usize, frame_rate_hz: f64) -> Self {
        Self {
            format_version: CORPUS_FORMAT_VERSION,
            vocabulary,
            frame_rate_hz,
            speakers: IndexMap::new(),
            generator: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// Frame-level unit ids.
    pub units: Vec<UnitId>,
    pub arousal: ArousalLabel,
    pub speaker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_vector: Option<SpeakerVector>,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    /// Arousal predicted by an external SER model for the resynthesized audio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ser_prediction: Option<f64>,
    /// Path to a mel feature matrix (JSON `{frames, bins, data}`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mel: Option<String>,
}

fn default_frame_rate() -> f64 {
    DEFAULT_FRAME_RATE_HZ
}

impl UtteranceRecord {
    pub fn runs(&self) -> RunLengthSequence {
        codec::dedup_ids(&self.units)
    }

    pub fn seconds(&self) -> f64 {
        self.units.len() as f64 / self.frame_rate_hz
    }
}

/// Same fields as [`UtteranceRecord`] with unchecked values, so validation
/// failures can be reported against the record id.
#[derive(Deserialize)]
struct RawRecord {
    id: String,
    units: Vec<UnitId>,
    arousal: f64,
    speaker_id: String,
    #[serde(default)]
    speaker_vector: Option<Vec<f64>>,
    #[serde(default = "default_frame_rate")]
    frame_rate_hz: f64,
    #[serde(default)]
    ser_prediction: Option<f64>,
    #[serde(default)]
    mel: Option<String>,
}

impl RawRecord {
    fn validate(self) -> Result<UtteranceRecord, CorpusError> {
        let invalid = |message: String| CorpusError::Invalid {
            id: self.id.clone(),
            message,
        };
        let arousal = ArousalLabel::new(self.arousal).map_err(|e| invalid(e.to_string()))?;
        let speaker_vector = match self.speaker_vector.clone() {
            Some(v) => Some(SpeakerVector::new(v).map_err(|e| invalid(e.to_string()))?),
            None => None,
        };
        Ok(UtteranceRecord {
            id: self.id,
            units: self.units,
            arousal,
            speaker_id: self.speaker_id,
            speaker_vector,
            frame_rate_hz: self.frame_rate_hz,
            ser_prediction: self.ser_prediction,
            mel: self.mel,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn new(header: CorpusHeader, records: Vec<UtteranceRecord>) -> Result<Self, CorpusError> {
        let corpus = Self { header, records };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn vocabulary(&self) -> usize {
        self.header.vocabulary
    }

    /// The record's own vector, else the header's entry for its speaker.
    pub fn speaker_vector<'a>(&'a self, record: &'a UtteranceRecord) -> Result<&'a SpeakerVector, CorpusError> {
        record
            .speaker_vector
            .as_ref()
            .or_else(|| self.header.speakers.get(&record.speaker_id))
            .ok_or_else(|| CorpusError::Invalid {
                id: record.id.clone(),
                message: format!("no speaker vector for speaker `{}`", record.speaker_id),
            })
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.header.format_version != CORPUS_FORMAT_VERSION {
            return Err(CorpusError::UnsupportedVersion(self.header.format_version));
        }
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    id: r.id.clone(),
                    line: i + 2,
                });
            }
            self.validate_record(r)?;
        }
        Ok(())
    }

    fn validate_record(&self, r: &UtteranceRecord) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Invalid {
            id: r.id.clone(),
            message,
        };
        codec::validate_ids(&r.units, self.header.vocabulary).map_err(|e| invalid(e.to_string()))?;
        if !(r.frame_rate_hz.is_finite() && r.frame_rate_hz > 0.0) {
            return Err(invalid(format!("frame rate {} must be positive", r.frame_rate_hz)));
        }
        if let Some(p) = r.ser_prediction {
            if !p.is_finite() {
                return Err(invalid("non-finite ser_prediction".into()));
            }
        }
        self.speaker_vector(r)?;
        Ok(())
    }

    fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            header: self.header.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let reader: Box<dyn Read> = if is_gzip(path) {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        Self::read(BufReader::new(reader))
    }

    pub fn read(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut header: Option<CorpusHeader> = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |e: serde_json::Error| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            };
            match &header {
                None => {
                    let h: CorpusHeader = serde_json::from_str(&line).map_err(malformed)?;
                    if h.format_version != CORPUS_FORMAT_VERSION {
                        return Err(CorpusError::UnsupportedVersion(h.format_version));
                    }
                    header = Some(h);
                }
                Some(_) => {
                    let raw: RawRecord = serde_json::from_str(&line).map_err(malformed)?;
                    if !seen.insert(raw.id.clone()) {
                        return Err(CorpusError::DuplicateId {
                            id: raw.id,
                            line: line_no,
                        });
                    }
                    records.push(raw.validate()?);
                }
            }
        }
        Corpus::new(header.ok_or(CorpusError::MissingHeader)?, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let file = BufWriter::new(File::create(path)?);
        if is_gzip(path) {
            let mut enc = GzEncoder::new(file, Compression::default());
            self.write(&mut enc)?;
            enc.finish()?.flush()?;
        } else {
            let mut file = file;
            self.write(&mut file)?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn write(&self, mut w: impl Write) -> Result<(), CorpusError> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Reads a mel feature matrix referenced by a record, relative to `base`.
pub fn load_mel(record: &UtteranceRecord, base: &Path) -> Result<Option<FeatureMatrix>, CorpusError> {
    let Some(rel) = &record.mel else {
        return Ok(None);
    };
    let raw: FeatureMatrix = serde_json::from_reader(BufReader::new(File::open(base.join(rel))?))?;
    FeatureMatrix::new(raw.frames, raw.bins, raw.data)
        .map(Some)
        .map_err(|e| CorpusError::Invalid {
            id: record.id.clone(),
            message: e.to_string(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_utterances: usize,
    pub vocabulary: usize,
    /// De-duplicated units per utterance.
    pub units_per_utt: usize,
    pub arousal_mean: f64,
    pub arousal_std: f64,
    /// Log-frames at arousal 4 for a unit and speaker with zero offset.
    pub base_log_duration: f64,
    /// Decrease in log-frames per arousal step.
    pub arousal_slope: f64,
    /// Per-unit Gaussian noise on the log duration.
    pub lognormal_sigma: f64,
    pub outlier_rate: f64,
    pub outlier_factor: u32,
    pub n_speakers: usize,
    /// Std of the fixed per-unit-id log-duration offset.
    pub unit_log_spread: f64,
    /// Std of the fixed per-speaker log-duration offset (speaking rate).
    pub speaker_log_spread: f64,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_utterances: 2000,
            vocabulary: 100,
            units_per_utt: 12,
            arousal_mean: 4.0,
            arousal_std: 0.95,
            base_log_duration: 4f64.ln(),
            arousal_slope: 0.05,
            lognormal_sigma: 0.25,
            outlier_rate: 0.0,
            outlier_factor: 5,
            n_speakers: 10,
            unit_log_spread: 0.2,
            speaker_log_spread: 0.1,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.n_utterances == 0 || self.units_per_utt == 0 || self.n_speakers == 0 {
            return fail("n_utterances, units_per_utt and n_speakers must be positive");
        }
        if self.vocabulary < 2 {
            return fail("vocabulary must be at least 2");
        }
        let positive = [
            ("arousal_std", self.arousal_std),
            ("lognormal_sigma", self.lognormal_sigma),
            ("frame_rate_hz", self.frame_rate_hz),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CorpusError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("unit_log_spread", self.unit_log_spread),
            ("speaker_log_spread", self.speaker_log_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CorpusError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.arousal_mean.is_finite() && self.base_log_duration.is_finite() && self.arousal_slope.is_finite()) {
            return fail("arousal_mean, base_log_duration and arousal_slope must be finite");
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return fail("outlier_rate must lie in [0, 1]");
        }
        if self.outlier_factor == 0 {
            return fail("outlier_factor must be positive");
        }
        Ok(())
    }
}

/// Generator settings and the fixed offsets drawn for this corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: GeneratorConfig,
    pub unit_log_offsets: Vec<f64>,
    pub speaker_log_offsets: IndexMap<String, f64>,
}

impl Provenance {
    /// Noise-free log duration of `unit` spoken by `speaker` at `arousal`.
    pub fn planted_log_duration(&self, unit: UnitId, speaker: &str, arousal: f64) -> f64 {
        let c = &self.config;
        c.base_log_duration
            + self.unit_log_offsets[unit as usize]
            + self.speaker_log_offsets.get(speaker).copied().unwrap_or(0.0)
            - c.arousal_slope * (arousal - AROUSAL_CENTER)
    }

    /// Seconds a perfect log-duration predictor would produce for `record`
    /// converted to `arousal`, using `max(1, round(exp(.)))` per unit.
    pub fn planted_seconds(&self, record: &UtteranceRecord, arousal: f64) -> f64 {
        let frames: f64 = record
            .runs()
            .units()
            .iter()
            .map(|&u| self.planted_log_duration(u, &record.speaker_id, arousal).exp().round().max(1.0))
            .sum();
        frames / record.frame_rate_hz
    }

    /// Mean planted seconds at arousal 1 minus mean at arousal 7.
    pub fn planted_contrast(&self, corpus: &Corpus) -> f64 {
        let n = corpus.len().max(1) as f64;
        corpus
            .records()
            .iter()
            .map(|r| self.planted_seconds(r, AROUSAL_MIN) - self.planted_seconds(r, AROUSAL_MAX))
            .sum::<f64>()
            / n
    }
}

/// A generated corpus together with the run-length sequences it was built from.
#[derive(Debug, Clone)]
pub struct Generated {
    pub corpus: Corpus,
    pub planted: Vec<RunLengthSequence>,
    /// Arousal draws before clipping to [1, 7].
    pub raw_arousal: Vec<f64>,
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Corpus, CorpusError> {
    Ok(generate_detailed(cfg)?.corpus)
}

pub fn generate_detailed(cfg: &GeneratorConfig) -> Result<Generated, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut speakers = IndexMap::new();
    let mut speaker_log_offsets = IndexMap::new();
    for s in 0..cfg.n_speakers {
        let id = format!("spk{s:03}");
        let v: Vec<f64> = (0..SPEAKER_DIM).map(|_| std_normal.sample(&mut rng)).collect();
        speakers.insert(id.clone(), SpeakerVector::new(v).expect("finite draws"));
        speaker_log_offsets.insert(id, cfg.speaker_log_spread * std_normal.sample(&mut rng));
    }
    let unit_log_offsets: Vec<f64> = (0..cfg.vocabulary)
        .map(|_| cfg.unit_log_spread * std_normal.sample(&mut rng))
        .collect();
    let provenance = Provenance {
        config: *cfg,
        unit_log_offsets,
        speaker_log_offsets,
    };

    let mut records = Vec::with_capacity(cfg.n_utterances);
    let mut planted = Vec::with_capacity(cfg.n_utterances);
    let mut raw_arousal = Vec::with_capacity(cfg.n_utterances);
    let vocab = cfg.vocabulary as u32;
    for i in 0..cfg.n_utterances {
        let speaker_id = format!("spk{:03}", rng.gen_range(0..cfg.n_speakers));
        let raw = cfg.arousal_mean + cfg.arousal_std * std_normal.sample(&mut rng);
        raw_arousal.push(raw);
        let arousal = raw.clamp(AROUSAL_MIN, AROUSAL_MAX);

        let mut units = Vec::with_capacity(cfg.units_per_utt);
        for _ in 0..cfg.units_per_utt {
            let u = match units.last() {
                None => rng.gen_range(0..vocab),
                Some(&prev) => {
                    let r = rng.gen_range(0..vocab - 1);
                    if r >= prev {
                        r + 1
                    } else {
                        r
                    }
                }
            };
            units.push(u);
        }
        let mut durations = Vec::with_capacity(units.len());
        for &u in &units {
            let mean = provenance.planted_log_duration(u, &speaker_id, arousal);
            let eps = cfg.lognormal_sigma * std_normal.sample(&mut rng);
            let mut d = (mean + eps).exp().round().clamp(1.0, 1e6) as u32;
            if rng.gen::<f64>() < cfg.outlier_rate {
                d = d.saturating_mul(cfg.outlier_factor);
            }
            durations.push(d);
        }
        let runs = RunLengthSequence::new(units, durations).expect("generated runs are valid");
        records.push(UtteranceRecord {
            id: format!("utt{i:06}"),
            units: codec::expand(&runs).ids,
            arousal: ArousalLabel::new(arousal).expect("clipped"),
            speaker_id,
            speaker_vector: None,
            frame_rate_hz: cfg.frame_rate_hz,
            ser_prediction: None,
            mel: None,
        });
        planted.push(runs);
    }

    let header = CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        vocabulary: cfg.vocabulary,
        frame_rate_hz: cfg.frame_rate_hz,
        speakers,
        generator: Some(provenance),
    };
    Ok(Generated {
        corpus: Corpus::new(header, records)?,
        planted,
        raw_arousal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Deterministic, speaker-stratified split.
///
/// Records are shuffled within each speaker and placed on a common axis by
/// their fractional rank inside that speaker; cutting that axis gives every
/// split a near-proportional share of each speaker.
pub fn split(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<Splits, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Split(format!(
            "ratios must be non-negative and sum to 1, got {r:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for (i, rec) in corpus.records().iter().enumerate() {
        groups.entry(rec.speaker_id.as_str()).or_default().push(i);
    }
    let mut placed: Vec<(f64, usize, usize)> = Vec::with_capacity(corpus.len());
    for (g, members) in groups.values_mut().enumerate() {
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (j, &idx) in members.iter().enumerate() {
            placed.push(((j as f64 + 0.5) / n, g, idx));
        }
    }
    placed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = placed.into_iter().map(|p| p.2).collect();

    let n = corpus.len();
    let n_train = ((n as f64) * ratios.train).round() as usize;
    let n_val = (((n as f64) * ratios.val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val.min(rest.len()));
    let sorted = |xs: &[usize]| {
        let mut v = xs.to_vec();
        v.sort_unstable();
        corpus.subset(&v)
    };
    Ok(Splits {
        train: sorted(train),
        val: sorted(val),
        test: sorted(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn small_cfg(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_utterances: 50,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_cfg(7)).unwrap();
        let b = generate(&small_cfg(7)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small_cfg(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_sequences_round_trip_to_plan() {
        let g = generate_detailed(&GeneratorConfig {
            outlier_rate: 0.1,
            ..small_cfg(3)
        })
        .unwrap();
        for (rec, plan) in g.corpus.records().iter().zip(&g.planted) {
            assert_eq!(&rec.runs(), plan);
            assert_eq!(plan.len(), 12);
        }
    }

    #[test]
    fn arousal_statistics() {
        let g = generate_detailed(&GeneratorConfig {
            n_utterances: 20_000,
            units_per_utt: 1,
            n_speakers: 1,
            ..Default::default()
        })
        .unwrap();
        let n = g.raw_arousal.len() as f64;
        let mean = g.raw_arousal.iter().sum::<f64>() / n;
        let std = (g.raw_arousal.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 4.0).abs() < 0.05, "{mean}");
        assert!((std - 0.95).abs() < 0.05, "{std}");
        assert!(g
            .corpus
            .records()
            .iter()
            .all(|r| (1.0..=7.0).contains(&r.arousal.value())));
    }

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    }

    /// Per-arousal-bin mean log duration regressed on the bin centre.
    fn binned_slope(corpus: &Corpus) -> f64 {
        let mut sums = [0.0; 7];
        let mut counts = [0usize; 7];
        for r in corpus.records() {
            let bin = (r.arousal.value().round() as usize).clamp(1, 7) - 1;
            for ld in r.runs().log_durations() {
                sums[bin] += ld;
                counts[bin] += 1;
            }
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = (0..7)
            .filter(|&b| counts[b] > 0)
            .map(|b| ((b + 1) as f64, sums[b] / counts[b] as f64))
            .unzip();
        slope(&xs, &ys)
    }

    #[test]
    fn planted_slope_is_recovered() {
        let cfg = GeneratorConfig {
            n_utterances: 5000,
            seed: 11,
            ..Default::default()
        };
        let s = binned_slope(&generate(&cfg).unwrap());
        assert!((s + cfg.arousal_slope).abs() <= 0.15 * cfg.arousal_slope, "{s}");
    }

    #[test]
    fn zero_slope_has_no_arousal_effect() {
        // Welch t-test of per-utterance mean frame counts, low vs high arousal.
        let cfg = GeneratorConfig {
            n_utterances: 2000,
            arousal_slope: 0.0,
            seed: 5,
            ..Default::default()
        };
        let corpus = generate(&cfg).unwrap();
        let (lo, hi): (Vec<f64>, Vec<f64>) = {
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for r in corpus.records() {
                let per_unit = r.units.len() as f64 / r.runs().len() as f64;
                if r.arousal.value() < 4.0 {
                    lo.push(per_unit)
                } else {
                    hi.push(per_unit)
                }
            }
            (lo, hi)
        };
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0), n)
        };
        let (m1, v1, n1) = stats(&lo);
        let (m2, v2, n2) = stats(&hi);
        let t = (m1 - m2) / (v1 / n1 + v2 / n2).sqrt();
        assert!(t.abs() < 2.576, "t = {t}");
    }

    #[test]
    fn default_contrast_in_band() {
        let g = generate(&GeneratorConfig {
            n_utterances: 2000,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let planted = g.header.generator.as_ref().unwrap().planted_contrast(&g);
        assert!((0.2..=0.4).contains(&planted), "{planted}");
    }

    #[test]
    fn config_validation() {
        for bad in [
            GeneratorConfig { n_utterances: 0, ..Default::default() },
            GeneratorConfig { vocabulary: 1, ..Default::default() },
            GeneratorConfig { arousal_std: 0.0, ..Default::default() },
            GeneratorConfig { lognormal_sigma: -1.0, ..Default::default() },
            GeneratorConfig { outlier_rate: 1.5, ..Default::default() },
        ] {
            assert!(matches!(generate(&bad), Err(CorpusError::Config(_))));
        }
        assert!(generate(&GeneratorConfig { arousal_slope: -0.1, n_utterances: 3, ..Default::default() }).is_ok());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate(&small_cfg(2)).unwrap();
        for name in ["c.jsonl", "c.jsonl.gz"] {
            let path = dir.path().join(name);
            corpus.save(&path).unwrap();
            assert_eq!(Corpus::load(&path).unwrap(), corpus);
        }
    }

    fn header_line() -> String {
        serde_json::to_string(&CorpusHeader::new(10, 49.0)).unwrap()
    }

    fn record_line(id: &str, arousal: f64) -> String {
        let v: Vec<String> = (0..SPEAKER_DIM).map(|_| "0.5".to_string()).collect();
        format!(
            r#"{{"id":"{id}","units":[1,1,2],"arousal":{arousal},"speaker_id":"s","speaker_vector":[{}]}}"#,
            v.join(",")
        )
    }

    #[test]
    fn rejects_out_of_range_arousal_with_id() {
        let text = format!("{}\n{}\n{}\n", header_line(), record_line("a", 3.0), record_line("bad", 9.0));
        let err = Corpus::read(Cursor::new(text)).unwrap_err();
        match err {
            CorpusError::Invalid { id, .. } => assert_eq!(id, "bad"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let good = record_line("a", 3.0);
        let text = format!("{}\n{}\n{}", header_line(), good, &good[..good.len() / 2]);
        match Corpus::read(Cursor::new(text)).unwrap_err() {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn duplicate_ids_and_bad_units() {
        let text = format!("{}\n{}\n{}\n", header_line(), record_line("a", 3.0), record_line("a", 4.0));
        assert!(matches!(
            Corpus::read(Cursor::new(text)),
            Err(CorpusError::DuplicateId { line: 3, .. })
        ));
        let bad_units = record_line("x", 3.0).replace("[1,1,2]", "[1,11]");
        let text = format!("{}\n{}\n", header_line(), bad_units);
        assert!(matches!(Corpus::read(Cursor::new(text)), Err(CorpusError::Invalid { .. })));
        assert!(matches!(Corpus::read(Cursor::new("")), Err(CorpusError::MissingHeader)));
        let short_vec = record_line("y", 3.0).replace("[0.5,", "[");
        let text = format!("{}\n{}\n", header_line(), short_vec);
        assert!(matches!(Corpus::read(Cursor::new(text)), Err(CorpusError::Invalid { .. })));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let corpus = generate(&GeneratorConfig {
            n_utterances: 100,
            ..Default::default()
        })
        .unwrap();
        let s = split(&corpus, SplitRatios::new(0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut ids: Vec<&str> = s
            .train
            .records()
            .iter()
            .chain(s.val.records())
            .chain(s.test.records())
            .map(|r| r.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);

        let again = split(&corpus, SplitRatios::new(0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!(again.train, s.train);
        assert_eq!(again.test, s.test);

        let all = split(&corpus, SplitRatios::new(1.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(all.train.len(), 100);
        assert!(all.val.is_empty() && all.test.is_empty());

        assert!(split(&corpus, SplitRatios::new(0.5, 0.1, 0.1), 4).is_err());
        let empty = Corpus::new(corpus.header.clone(), vec![]).unwrap();
        assert!(matches!(split(&empty, SplitRatios::new(1.0, 0.0, 0.0), 0), Err(CorpusError::Empty)));
    }

    #[test]
    fn split_is_speaker_stratified() {
        let corpus = generate(&GeneratorConfig {
            n_utterances: 400,
            n_speakers: 4,
            ..Default::default()
        })
        .unwrap();
        let s = split(&corpus, SplitRatios::new(0.5, 0.25, 0.25), 9).unwrap();
        for spk in corpus.header.speakers.keys() {
            let total = corpus.records().iter().filter(|r| &r.speaker_id == spk).count() as f64;
            let in_train = s.train.records().iter().filter(|r| &r.speaker_id == spk).count() as f64;
            assert!((in_train / total - 0.5).abs() < 0.05, "{spk}: {in_train}/{total}");
        }
    }
}
