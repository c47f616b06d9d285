//! Reconstruction and prosody metrics over frame tracks.
//!
//! * [`ffe`]: F0 frame error, percent of frames with a voicing mismatch or a
//!   pitch deviation above 20% of the reference.
//! * [`mcd`]: mel-cepstral distortion in dB, coefficient 0 excluded, frames
//!   aligned one to one.
//! * [`expressiveness_stddev`]: phonemes grouped by symbol type across all
//!   utterances; population stddev per type, averaged over types.
//! * [`diversity_stddev`]: phonemes grouped by position across resamples of
//!   one text; population stddev per position, averaged over positions, then
//!   over texts.
//!
//! Phonemes without voiced frames carry no F0 and are left out of every F0
//! statistic.

mod report;

pub use report::{render_tables, sort_rows, MetricsReport, ModelFamily, TableKind};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::SeqTensor;

/// Relative pitch deviation above which a voiced frame counts as an error.
pub const FFE_PITCH_THRESHOLD: f64 = 0.2;

/// `10 / ln 10`.
const DB_PER_NEPER: f64 = 4.342_944_819_032_518;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("frame count mismatch: reference {reference}, synthesized {synthesized}")]
    FrameMismatch {
        reference: usize,
        synthesized: usize,
    },
    #[error("cepstral order mismatch: reference {reference}, synthesized {synthesized}")]
    OrderMismatch {
        reference: usize,
        synthesized: usize,
    },
    #[error("invalid frame track: {0}")]
    InvalidTrack(String),
    #[error("alignment covers {aligned} frames but the track has {frames}")]
    AlignmentMismatch { aligned: usize, frames: usize },
    #[error("no symbol type occurs at least twice")]
    NoQualifyingType,
    #[error("diversity needs at least 2 resamples per text, got {0}")]
    TooFewResamples(usize),
    #[error("text {text}: resample {resample} has {actual} phonemes, expected {expected}")]
    InconsistentPhonemeCount {
        text: usize,
        resample: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{0}")]
    Empty(&'static str),
}

/// Frame-level prosody tracks of one utterance. `f0` is meaningful only
/// where `voiced` is set and is stored as 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrack {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub energy: Vec<f64>,
    pub mcep: SeqTensor,
}

impl FrameTrack {
    pub fn new(
        f0: Vec<f64>,
        voiced: Vec<bool>,
        energy: Vec<f64>,
        mcep: SeqTensor,
    ) -> Result<Self, MetricsError> {
        let n = mcep.rows();
        if f0.len() != n || voiced.len() != n || energy.len() != n {
            return Err(MetricsError::InvalidTrack(format!(
                "field lengths differ: f0 {}, voiced {}, energy {}, mcep {}",
                f0.len(),
                voiced.len(),
                energy.len(),
                n
            )));
        }
        if let Some(i) = (0..n).find(|&i| voiced[i] && !(f0[i] > 0.0 && f0[i].is_finite())) {
            return Err(MetricsError::InvalidTrack(format!(
                "voiced frame {i} has invalid f0 {}",
                f0[i]
            )));
        }
        if !energy.iter().all(|e| e.is_finite()) {
            return Err(MetricsError::InvalidTrack("non-finite energy".into()));
        }
        Ok(Self {
            f0,
            voiced,
            energy,
            mcep,
        })
    }

    pub fn frames(&self) -> usize {
        self.mcep.rows()
    }
}

/// Per-phoneme prosody features read off an aligned frame track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhonemeFeatures {
    /// Mean energy over the phoneme's frames.
    pub energy: f64,
    /// Mean F0 over voiced frames, absent when none are voiced.
    pub f0: Option<f64>,
    /// Frame count.
    pub duration: usize,
}

/// Standard deviations of energy, F0 and duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProsodyStd {
    pub energy: f64,
    pub f0: f64,
    pub duration: f64,
}

impl ProsodyStd {
    pub fn as_array(&self) -> [f64; 3] {
        [self.energy, self.f0, self.duration]
    }
}

fn check_frames(reference: &FrameTrack, synthesized: &FrameTrack) -> Result<usize, MetricsError> {
    if reference.frames() != synthesized.frames() {
        return Err(MetricsError::FrameMismatch {
            reference: reference.frames(),
            synthesized: synthesized.frames(),
        });
    }
    Ok(reference.frames())
}

/// F0 frame error in percent.
pub fn ffe(reference: &FrameTrack, synthesized: &FrameTrack) -> Result<f64, MetricsError> {
    let n = check_frames(reference, synthesized)?;
    let errors = (0..n)
        .filter(|&i| {
            let (vr, vs) = (reference.voiced[i], synthesized.voiced[i]);
            vr != vs
                || (vr
                    && (synthesized.f0[i] - reference.f0[i]).abs()
                        > FFE_PITCH_THRESHOLD * reference.f0[i])
        })
        .count();
    Ok(100.0 * errors as f64 / n as f64)
}

/// Mel-cepstral distortion in dB averaged over frames.
pub fn mcd(reference: &FrameTrack, synthesized: &FrameTrack) -> Result<f64, MetricsError> {
    let n = check_frames(reference, synthesized)?;
    if reference.mcep.cols() != synthesized.mcep.cols() {
        return Err(MetricsError::OrderMismatch {
            reference: reference.mcep.cols(),
            synthesized: synthesized.mcep.cols(),
        });
    }
    let total: f64 = reference
        .mcep
        .iter_rows()
        .zip(synthesized.mcep.iter_rows())
        .map(|(a, b)| {
            let sq: f64 = a[1..]
                .iter()
                .zip(&b[1..])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            DB_PER_NEPER * (2.0 * sq).sqrt()
        })
        .sum();
    Ok(total / n as f64)
}

/// Splits a frame track into phonemes with the given frame counts.
pub fn features_from_track(
    track: &FrameTrack,
    durations: &[usize],
) -> Result<Vec<PhonemeFeatures>, MetricsError> {
    let aligned: usize = durations.iter().sum();
    if aligned != track.frames() || durations.contains(&0) {
        return Err(MetricsError::AlignmentMismatch {
            aligned,
            frames: track.frames(),
        });
    }
    let mut start = 0;
    Ok(durations
        .iter()
        .map(|&d| {
            let frames = start..start + d;
            start += d;
            let energy = track.energy[frames.clone()].iter().sum::<f64>() / d as f64;
            let voiced: Vec<f64> = frames
                .filter(|&i| track.voiced[i])
                .map(|i| track.f0[i])
                .collect();
            let f0 = (!voiced.is_empty()).then(|| voiced.iter().sum::<f64>() / voiced.len() as f64);
            PhonemeFeatures {
                energy,
                f0,
                duration: d,
            }
        })
        .collect())
}

/// Population standard deviation; `None` for fewer than two values.
pub fn population_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    // shifting by the first value makes identical inputs give exactly 0
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / n;
    Some(
        (values
            .iter()
            .map(|v| (v - shift - mean).powi(2))
            .sum::<f64>()
            / n)
            .sqrt(),
    )
}

fn average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Stddev triple for one group of phonemes, each feature `None` when the
/// group has fewer than two usable values.
fn group_std(group: &[PhonemeFeatures]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let e: Vec<f64> = group.iter().map(|p| p.energy).collect();
    let f: Vec<f64> = group.iter().filter_map(|p| p.f0).collect();
    let d: Vec<f64> = group.iter().map(|p| p.duration as f64).collect();
    (population_std(&e), population_std(&f), population_std(&d))
}

#[derive(Default)]
struct StdAccumulator {
    energy: Vec<f64>,
    f0: Vec<f64>,
    duration: Vec<f64>,
}

impl StdAccumulator {
    fn push(&mut self, (e, f, d): (Option<f64>, Option<f64>, Option<f64>)) {
        self.energy.extend(e);
        self.f0.extend(f);
        self.duration.extend(d);
    }

    fn finish(&self) -> ProsodyStd {
        ProsodyStd {
            energy: average(&self.energy),
            f0: average(&self.f0),
            duration: average(&self.duration),
        }
    }
}

/// Expressiveness stddev over `(symbols, features)` pairs.
pub fn expressiveness_stddev(
    utterances: &[(Vec<usize>, Vec<PhonemeFeatures>)],
) -> Result<ProsodyStd, MetricsError> {
    let mut by_type: std::collections::BTreeMap<usize, Vec<PhonemeFeatures>> = Default::default();
    for (symbols, features) in utterances {
        if symbols.len() != features.len() {
            return Err(MetricsError::AlignmentMismatch {
                aligned: features.len(),
                frames: symbols.len(),
            });
        }
        for (&s, &f) in symbols.iter().zip(features) {
            by_type.entry(s).or_default().push(f);
        }
    }
    let mut acc = StdAccumulator::default();
    for group in by_type.values().filter(|g| g.len() >= 2) {
        acc.push(group_std(group));
    }
    if acc.energy.is_empty() {
        return Err(MetricsError::NoQualifyingType);
    }
    Ok(acc.finish())
}

/// Diversity stddev over `texts[t][r][n]`: text `t`, resample `r`, phoneme `n`.
pub fn diversity_stddev(texts: &[Vec<Vec<PhonemeFeatures>>]) -> Result<ProsodyStd, MetricsError> {
    if texts.is_empty() {
        return Err(MetricsError::Empty("diversity needs at least one text"));
    }
    let mut per_text = StdAccumulator::default();
    for (t, resamples) in texts.iter().enumerate() {
        if resamples.len() < 2 {
            return Err(MetricsError::TooFewResamples(resamples.len()));
        }
        let n = resamples[0].len();
        if let Some((r, bad)) = resamples.iter().enumerate().find(|(_, s)| s.len() != n) {
            return Err(MetricsError::InconsistentPhonemeCount {
                text: t,
                resample: r,
                expected: n,
                actual: bad.len(),
            });
        }
        let mut positions = StdAccumulator::default();
        for pos in 0..n {
            let column: Vec<PhonemeFeatures> = resamples.iter().map(|s| s[pos]).collect();
            positions.push(group_std(&column));
        }
        let text_std = positions.finish();
        per_text.energy.push(text_std.energy);
        per_text.duration.push(text_std.duration);
        if !positions.f0.is_empty() {
            per_text.f0.push(text_std.f0);
        }
    }
    Ok(per_text.finish())
}
