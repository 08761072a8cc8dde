//! Causal filtering and spectral features.

mod filter;
mod spectrum;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal_io::SignalChunk;
use crate::time::Timestamp;

pub use filter::{design_bandpass, design_lowpass, Biquad, IirFilter};
pub use spectrum::{band_power, Psd, Welch, WELCH_SEGMENT_SECS};

/// Filter state as carried across chunks; alias kept for the streaming API.
pub type FilterState = IirFilter;

pub const EPOCH_SECS: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("invalid band: {0}")]
    InvalidBand(String),
    #[error("unstable filter design: {0}")]
    UnstableDesign(String),
    #[error("chunk rate {got} Hz does not match filter rate {expected} Hz")]
    RateMismatch { expected: f64, got: f64 },
    #[error("window of {got} samples is shorter than the {needed} required")]
    WindowTooShort { needed: usize, got: usize },
}

/// Frequency interval in Hz, inclusive at both edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low: f64,
    pub high: f64,
}

impl Band {
    pub const SWA: Band = Band { low: 0.4, high: 5.0 };
    pub const DELTA: Band = Band { low: 0.5, high: 4.0 };
    pub const THETA: Band = Band { low: 4.0, high: 8.0 };
    pub const ALPHA: Band = Band { low: 8.0, high: 12.0 };
    pub const SIGMA: Band = Band { low: 11.0, high: 15.0 };
    pub const BETA: Band = Band { low: 15.0, high: 30.0 };
    pub const TOTAL: Band = Band { low: 0.4, high: 30.0 };

    pub fn validate(&self, sample_rate: f64) -> Result<(), DspError> {
        if !(self.low > 0.0 && self.low < self.high && self.high < sample_rate / 2.0) {
            return Err(DspError::InvalidBand(format!(
                "need 0 < low < high < {} Hz, got [{}, {}]",
                sample_rate / 2.0,
                self.low,
                self.high
            )));
        }
        Ok(())
    }
}

/// Named bands reported in every epoch.
pub const FEATURE_BANDS: [(&str, Band); 5] = [
    ("swa", Band::SWA),
    ("delta", Band::DELTA),
    ("theta", Band::THETA),
    ("alpha", Band::ALPHA),
    ("beta", Band::BETA),
];

/// Band-pass design request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub low: f64,
    pub high: f64,
    /// Total filter order; even.
    pub order: usize,
}

impl BandSpec {
    pub const SWA: BandSpec = BandSpec { low: 0.4, high: 5.0, order: 4 };

    pub fn band(&self) -> Band {
        Band { low: self.low, high: self.high }
    }

    pub fn validate(&self, sample_rate: f64) -> Result<(), DspError> {
        if self.order == 0 || self.order % 2 != 0 {
            return Err(DspError::InvalidBand(format!("order {} must be even and positive", self.order)));
        }
        self.band().validate(sample_rate)
    }
}

impl Default for BandSpec {
    fn default() -> Self {
        BandSpec::SWA
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochFeatures {
    pub epoch_index: u64,
    pub epoch_start: Timestamp,
    /// uV^2 for swa, delta, theta, alpha and beta.
    pub band_powers: BTreeMap<String, f64>,
    /// Spindle-range (11-15 Hz) power in uV^2.
    pub sigma_power: f64,
    /// Power over 0.4-30 Hz in uV^2.
    pub total_power: f64,
    pub rms: f64,
    /// Set when part of the epoch was missing and zero-filled.
    pub quality_flagged: bool,
}

impl EpochFeatures {
    pub fn power(&self, band: &str) -> f64 {
        self.band_powers.get(band).copied().unwrap_or(0.0)
    }

    pub fn swa(&self) -> f64 {
        self.power("swa")
    }
    pub fn delta(&self) -> f64 {
        self.power("delta")
    }
    pub fn theta(&self) -> f64 {
        self.power("theta")
    }
    pub fn alpha(&self) -> f64 {
        self.power("alpha")
    }
    pub fn beta(&self) -> f64 {
        self.power("beta")
    }

    /// Computes features for one complete epoch of samples.
    pub fn compute(epoch_index: u64, epoch_start: Timestamp, samples: &[f64], welch: &mut Welch, flagged: bool) -> Self {
        let psd = welch.psd(samples);
        let band_powers = FEATURE_BANDS
            .iter()
            .map(|(name, band)| (name.to_string(), psd.band_power(*band)))
            .collect();
        let rms = (samples.iter().map(|x| x * x).sum::<f64>() / samples.len().max(1) as f64).sqrt();
        EpochFeatures {
            epoch_index,
            epoch_start,
            band_powers,
            sigma_power: psd.band_power(Band::SIGMA),
            total_power: psd.band_power(Band::TOTAL),
            rms,
            quality_flagged: flagged,
        }
    }
}

/// Cuts one channel into non-overlapping epochs aligned to the session start.
pub struct EpochAccumulator {
    sample_rate: f64,
    epoch_frames: usize,
    session_start: Timestamp,
    next_frame: u64,
    buffer: Vec<f64>,
    flagged: bool,
    epoch_index: u64,
    welch: Welch,
}

impl EpochAccumulator {
    pub fn new(sample_rate: f64, epoch_secs: f64, session_start: Timestamp) -> Self {
        let epoch_frames = (epoch_secs * sample_rate).round() as usize;
        EpochAccumulator {
            sample_rate,
            epoch_frames,
            session_start,
            next_frame: 0,
            buffer: Vec::with_capacity(epoch_frames),
            flagged: false,
            epoch_index: 0,
            welch: Welch::for_window(sample_rate, epoch_frames),
        }
    }

    pub fn epoch_frames(&self) -> usize {
        self.epoch_frames
    }

    /// Graph time at which epoch `index` ends.
    pub fn epoch_end(&self, index: u64) -> Timestamp {
        self.session_start.at_frame((index + 1) * self.epoch_frames as u64, self.sample_rate)
    }

    fn finish_epoch(&mut self) -> EpochFeatures {
        let start = self.session_start.at_frame(self.epoch_index * self.epoch_frames as u64, self.sample_rate);
        let f = EpochFeatures::compute(self.epoch_index, start, &self.buffer, &mut self.welch, self.flagged);
        self.buffer.clear();
        self.flagged = false;
        self.epoch_index += 1;
        f
    }

    /// Appends one sample; returns the epoch it completes, if any.
    #[inline]
    pub fn push_sample(&mut self, x: f64) -> Option<EpochFeatures> {
        self.buffer.push(x);
        self.next_frame += 1;
        (self.buffer.len() == self.epoch_frames).then(|| self.finish_epoch())
    }

    /// Zero-fills `frames` missing samples and flags the affected epochs.
    pub fn push_gap(&mut self, frames: u64) -> Vec<EpochFeatures> {
        let mut out = Vec::new();
        for _ in 0..frames {
            self.flagged = true;
            if let Some(f) = self.push_sample(0.0) {
                out.push(f);
            }
        }
        out
    }

    /// Appends `channel` of `chunk`, treating any jump in start time as a gap.
    pub fn push_chunk(&mut self, chunk: &SignalChunk, channel: usize) -> Vec<EpochFeatures> {
        let mut out = Vec::new();
        let chunk_frame = (chunk.start.secs_since(self.session_start) * self.sample_rate).round();
        if chunk_frame > self.next_frame as f64 {
            out.extend(self.push_gap(chunk_frame as u64 - self.next_frame));
        }
        for &x in chunk.channel(channel) {
            if let Some(f) = self.push_sample(x) {
                out.push(f);
            }
        }
        out
    }
}

/// Batch form of [`EpochAccumulator`]: features for every complete epoch.
pub fn epoch_features<'a>(
    chunks: impl IntoIterator<Item = &'a SignalChunk>,
    channel: usize,
    epoch_secs: f64,
) -> Vec<EpochFeatures> {
    let mut chunks = chunks.into_iter().peekable();
    let Some(first) = chunks.peek() else { return Vec::new() };
    let mut acc = EpochAccumulator::new(first.sample_rate, epoch_secs, Timestamp::ZERO);
    chunks.flat_map(|c| acc.push_chunk(c, channel)).collect()
}
