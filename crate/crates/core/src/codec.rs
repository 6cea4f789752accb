//! Run-length codec for frame-level discrete speech units.
//!
//! A frame-level [`UnitSequence`] is collapsed into a [`RunLengthSequence`]
//! of de-duplicated unit ids and their repetition counts, and expanded back
//! again once (predicted) durations are available.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Frame rate of HuBERT-style discrete units.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 49.0;

/// Unit identifier (k-means cluster index).
pub type UnitId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("units and durations differ in length ({units} vs {durations})")]
    LengthMismatch { units: usize, durations: usize },
    #[error("duration at position {position} is zero")]
    ZeroDuration { position: usize },
    #[error("frame rate must be positive and finite, got {0}")]
    InvalidFrameRate(f64),
    #[error("unit id {id} at position {position} is outside vocabulary of size {vocabulary}")]
    OutOfVocabulary {
        id: UnitId,
        position: usize,
        vocabulary: usize,
    },
    #[error("consecutive duplicate unit {id} at position {position}")]
    ConsecutiveDuplicate { id: UnitId, position: usize },
}

/// Frame-level unit ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub ids: Vec<UnitId>,
    pub frame_rate_hz: f64,
}

impl UnitSequence {
    pub fn new(ids: Vec<UnitId>) -> Self {
        Self {
            ids,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        }
    }

    pub fn with_frame_rate(ids: Vec<UnitId>, frame_rate_hz: f64) -> Result<Self, CodecError> {
        check_frame_rate(frame_rate_hz)?;
        Ok(Self { ids, frame_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks every id against the vocabulary size.
    pub fn validate(&self, vocabulary: usize) -> Result<(), CodecError> {
        validate_ids(&self.ids, vocabulary)
    }

    pub fn seconds(&self) -> f64 {
        self.ids.len() as f64 / self.frame_rate_hz
    }
}

/// De-duplicated units with per-unit repetition counts.
///
/// Fields are private so every value in circulation satisfies the run-length
/// invariants: equal lengths, no equal neighbours, durations of at least one.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct RunLengthSequence {
    units: Vec<UnitId>,
    durations: Vec<u32>,
}

impl RunLengthSequence {
    pub fn new(units: Vec<UnitId>, durations: Vec<u32>) -> Result<Self, CodecError> {
        if units.len() != durations.len() {
            return Err(CodecError::LengthMismatch {
                units: units.len(),
                durations: durations.len(),
            });
        }
        if let Some(position) = durations.iter().position(|&d| d == 0) {
            return Err(CodecError::ZeroDuration { position });
        }
        check_no_consecutive_duplicates(&units)?;
        Ok(Self { units, durations })
    }

    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    pub fn durations(&self) -> &[u32] {
        &self.durations
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Total number of frames covered.
    pub fn total_frames(&self) -> u64 {
        self.durations.iter().map(|&d| u64::from(d)).sum()
    }

    /// Natural log of each duration; the regression target of the predictor.
    pub fn log_durations(&self) -> Vec<f64> {
        self.durations.iter().map(|&d| f64::from(d).ln()).collect()
    }

    pub fn into_parts(self) -> (Vec<UnitId>, Vec<u32>) {
        (self.units, self.durations)
    }
}

/// Collapses consecutive repeats into (unit, count) runs.
pub fn dedup(seq: &UnitSequence) -> RunLengthSequence {
    dedup_ids(&seq.ids)
}

pub fn dedup_ids(ids: &[UnitId]) -> RunLengthSequence {
    let mut units = Vec::new();
    let mut durations: Vec<u32> = Vec::new();
    for &id in ids {
        match (units.last(), durations.last_mut()) {
            (Some(&last), Some(count)) if last == id => *count += 1,
            _ => {
                units.push(id);
                durations.push(1);
            }
        }
    }
    RunLengthSequence { units, durations }
}

/// Repeats each unit by its duration. The result uses the default frame rate.
pub fn expand(rls: &RunLengthSequence) -> UnitSequence {
    UnitSequence::new(expand_parts(&rls.units, &rls.durations))
}

fn expand_parts(units: &[UnitId], durations: &[u32]) -> Vec<UnitId> {
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    let mut ids = Vec::with_capacity(total);
    for (&unit, &d) in units.iter().zip(durations) {
        ids.extend(std::iter::repeat_n(unit, d as usize));
    }
    ids
}

/// Checked expansion from raw arrays (rejects zero durations and length mismatch).
pub fn expand_checked(units: &[UnitId], durations: &[u32]) -> Result<UnitSequence, CodecError> {
    if units.len() != durations.len() {
        return Err(CodecError::LengthMismatch {
            units: units.len(),
            durations: durations.len(),
        });
    }
    if let Some(position) = durations.iter().position(|&d| d == 0) {
        return Err(CodecError::ZeroDuration { position });
    }
    Ok(UnitSequence::new(expand_parts(units, durations)))
}

/// Duration in seconds of the frames covered by `rls`.
pub fn seconds_of(rls: &RunLengthSequence, frame_rate_hz: f64) -> Result<f64, CodecError> {
    check_frame_rate(frame_rate_hz)?;
    Ok(rls.total_frames() as f64 / frame_rate_hz)
}

pub fn validate_ids(ids: &[UnitId], vocabulary: usize) -> Result<(), CodecError> {
    match ids.iter().position(|&id| id as usize >= vocabulary) {
        Some(position) => Err(CodecError::OutOfVocabulary {
            id: ids[position],
            position,
            vocabulary,
        }),
        None => Ok(()),
    }
}

pub fn check_no_consecutive_duplicates(units: &[UnitId]) -> Result<(), CodecError> {
    match units.windows(2).position(|w| w[0] == w[1]) {
        Some(i) => Err(CodecError::ConsecutiveDuplicate {
            id: units[i],
            position: i + 1,
        }),
        None => Ok(()),
    }
}

fn check_frame_rate(rate: f64) -> Result<(), CodecError> {
    if rate.is_finite() && rate > 0.0 {
        Ok(())
    } else {
        Err(CodecError::InvalidFrameRate(rate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rls(units: &[UnitId], durations: &[u32]) -> RunLengthSequence {
        RunLengthSequence::new(units.to_vec(), durations.to_vec()).unwrap()
    }

    #[test]
    fn dedup_worked_example() {
        let out = dedup(&UnitSequence::new(vec![1, 1, 2, 2, 2, 1, 3, 3, 3, 3]));
        assert_eq!(out.units(), &[1, 2, 1, 3]);
        assert_eq!(out.durations(), &[2, 3, 1, 4]);
    }

    #[test]
    fn dedup_empty_and_singleton() {
        assert!(dedup(&UnitSequence::new(vec![])).is_empty());
        let one = dedup(&UnitSequence::new(vec![5]));
        assert_eq!(one, rls(&[5], &[1]));
    }

    #[test]
    fn expand_examples() {
        assert_eq!(
            expand(&rls(&[1, 2, 1, 3], &[2, 3, 1, 4])).ids,
            vec![1, 1, 2, 2, 2, 1, 3, 3, 3, 3]
        );
        assert_eq!(expand(&rls(&[4, 9, 4], &[1, 1, 1])).ids, vec![4, 9, 4]);
        assert_eq!(expand(&rls(&[7], &[5])).ids, vec![7; 5]);
    }

    #[test]
    fn constructor_rejects_bad_runs() {
        assert_eq!(
            RunLengthSequence::new(vec![1, 2], vec![1]),
            Err(CodecError::LengthMismatch {
                units: 2,
                durations: 1
            })
        );
        assert_eq!(
            RunLengthSequence::new(vec![1, 2], vec![1, 0]),
            Err(CodecError::ZeroDuration { position: 1 })
        );
        assert_eq!(
            RunLengthSequence::new(vec![1, 1], vec![1, 1]),
            Err(CodecError::ConsecutiveDuplicate { id: 1, position: 1 })
        );
        assert!(expand_checked(&[1], &[0]).is_err());
        assert!(expand_checked(&[1, 2], &[3]).is_err());
    }

    #[test]
    fn seconds() {
        assert_eq!(seconds_of(&rls(&[1, 2], &[40, 9]), 49.0).unwrap(), 1.0);
        assert_eq!(seconds_of(&rls(&[1, 2, 3], &[100, 50, 46]), 49.0).unwrap(), 196.0 / 49.0);
        assert_eq!(seconds_of(&RunLengthSequence::default(), 49.0).unwrap(), 0.0);
        assert!(seconds_of(&RunLengthSequence::default(), 0.0).is_err());
        assert!(seconds_of(&RunLengthSequence::default(), -3.0).is_err());
    }

    #[test]
    fn vocabulary_check() {
        let seq = UnitSequence::new(vec![0, 3, 99]);
        assert!(seq.validate(100).is_ok());
        assert_eq!(
            seq.validate(50),
            Err(CodecError::OutOfVocabulary {
                id: 99,
                position: 2,
                vocabulary: 50
            })
        );
    }

    // Brute force: walk the input and compare each frame against the run it
    // must belong to.
    fn reexpansion_oracle(ids: &[UnitId], out: &RunLengthSequence) -> bool {
        let mut cursor = 0;
        for (&u, &d) in out.units().iter().zip(out.durations()) {
            for _ in 0..d {
                if ids.get(cursor) != Some(&u) {
                    return false;
                }
                cursor += 1;
            }
        }
        cursor == ids.len()
    }

    proptest! {
        #[test]
        fn dedup_matches_reexpansion(ids in prop::collection::vec(0u32..6, 0..64)) {
            let out = dedup_ids(&ids);
            prop_assert!(reexpansion_oracle(&ids, &out));
        }

        #[test]
        fn round_trip(vocab in 1u32..200, raw in prop::collection::vec(any::<u32>(), 0..512)) {
            let ids: Vec<UnitId> = raw.into_iter().map(|x| x % vocab).collect();
            let seq = UnitSequence::new(ids.clone());
            let runs = dedup(&seq);
            prop_assert_eq!(expand(&runs), seq);
            prop_assert_eq!(runs.total_frames() as usize, ids.len());
            let distinct_neighbours = ids.windows(2).all(|w| w[0] != w[1]);
            prop_assert!(runs.len() <= ids.len());
            prop_assert_eq!(runs.len() == ids.len(), distinct_neighbours);
        }

        #[test]
        fn reverse_round_trip(runs in prop::collection::vec((0u32..8, 1u32..9), 0..64)) {
            let mut units: Vec<UnitId> = Vec::new();
            let mut durations = Vec::new();
            for (u, d) in runs {
                if units.last() != Some(&u) {
                    units.push(u);
                    durations.push(d);
                }
            }
            let r = RunLengthSequence::new(units, durations).unwrap();
            prop_assert_eq!(dedup(&expand(&r)), r);
        }
    }
}
