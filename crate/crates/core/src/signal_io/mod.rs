//! EEG data model, file readers/writers, device simulation and montage rematrixing.

mod dcm;
mod device;
mod edf;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgbus::{BusPayload, PayloadKind};
use crate::time::Timestamp;

pub use dcm::{read_dcm_log, write_dcm_log, DcmItem, DcmLog, DcmReader, DcmWriter, BlockType, AuxKind};
pub use device::{Delivery, JitterModel, SimulatedDevice};
pub use edf::{read_edf, EdfReader, EdfStream, EdfSignalHeader};

/// Largest channel count the acquisition frontend supports.
pub const MAX_CHANNELS: usize = 16;
pub const DEFAULT_SAMPLE_RATE: f64 = 250.0;
/// 4.5 V reference, gain 24, 24-bit converter.
pub const DEFAULT_LSB_MICROVOLTS: f64 = 0.02235;
pub const DCM_ADC_BITS: u8 = 24;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("inconsistent rates: {0}")]
    InconsistentRates(String),
    #[error("truncated data record {record} (expected {expected} bytes, got {got})")]
    TruncatedRecord { record: u64, expected: usize, got: usize },
    #[error("bad magic {0:?}, expected \"DCM1\"")]
    BadMagic(Vec<u8>),
    #[error("bad crc in block at offset {offset}")]
    BadCrc { offset: u64 },
    #[error("truncated block at offset {offset}")]
    TruncatedBlock { offset: u64 },
    #[error("sample {value} uV on channel {channel} exceeds the 24-bit range at {lsb} uV/code")]
    OverRange { channel: usize, value: f64, lsb: f64 },
    #[error("derivation index out of range: {0}")]
    BadIndex(String),
    #[error("invalid device metadata: {0}")]
    InvalidMeta(String),
    #[error("invalid chunk: {0}")]
    InvalidChunk(String),
}

impl SignalError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SignalError::Io { path: path.into(), source }
    }
}

/// Per-channel montage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derivation {
    Raw,
    Referential { reference: usize },
    Bipolar { pos: usize, neg: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMeta {
    pub channel_count: usize,
    pub sample_rate: f64,
    pub adc_bits: u8,
    pub lsb_microvolts: f64,
    pub channel_labels: Vec<String>,
    pub derivation: Vec<Derivation>,
}

impl DeviceMeta {
    /// Raw montage with default frontend scaling and generated labels.
    pub fn dcm(channel_count: usize, sample_rate: f64) -> Self {
        DeviceMeta {
            channel_count,
            sample_rate,
            adc_bits: DCM_ADC_BITS,
            lsb_microvolts: DEFAULT_LSB_MICROVOLTS,
            channel_labels: (0..channel_count).map(|c| format!("ch{}", c + 1)).collect(),
            derivation: vec![Derivation::Raw; channel_count],
        }
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.channel_count == 0 || self.channel_count > MAX_CHANNELS {
            return Err(SignalError::InvalidMeta(format!(
                "channel_count {} outside [1, {MAX_CHANNELS}]",
                self.channel_count
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(SignalError::InvalidMeta(format!("sample_rate {}", self.sample_rate)));
        }
        if !(self.lsb_microvolts > 0.0 && self.lsb_microvolts.is_finite()) {
            return Err(SignalError::InvalidMeta(format!("lsb_microvolts {}", self.lsb_microvolts)));
        }
        if self.channel_labels.len() != self.channel_count {
            return Err(SignalError::InvalidMeta("label count differs from channel_count".into()));
        }
        if self.derivation.len() != self.channel_count {
            return Err(SignalError::InvalidMeta("derivation count differs from channel_count".into()));
        }
        self.validate_derivation()
    }

    fn validate_derivation(&self) -> Result<(), SignalError> {
        let n = self.channel_count;
        for (c, d) in self.derivation.iter().enumerate() {
            match *d {
                Derivation::Raw => {}
                Derivation::Referential { reference } if reference >= n => {
                    return Err(SignalError::BadIndex(format!("channel {c}: reference {reference} >= {n}")));
                }
                Derivation::Bipolar { pos, neg } if pos >= n || neg >= n || pos == neg => {
                    return Err(SignalError::BadIndex(format!("channel {c}: bipolar ({pos}, {neg}) with {n} channels")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Largest magnitude representable by a signed code of `adc_bits`.
    pub fn full_scale_microvolts(&self) -> f64 {
        ((1u64 << (self.adc_bits - 1)) - 1) as f64 * self.lsb_microvolts
    }
}

/// Block of multichannel samples in microvolts, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalChunk {
    pub start: Timestamp,
    pub sample_rate: f64,
    pub seq: u64,
    channels: usize,
    frames: usize,
    samples: Vec<f64>,
}

impl SignalChunk {
    /// `data[c]` holds the samples for channel `c`; all rows must have equal, nonzero length.
    pub fn new(start: Timestamp, sample_rate: f64, seq: u64, data: Vec<Vec<f64>>) -> Result<Self, SignalError> {
        let channels = data.len();
        if channels == 0 {
            return Err(SignalError::InvalidChunk("no channels".into()));
        }
        let frames = data[0].len();
        if frames == 0 {
            return Err(SignalError::InvalidChunk("zero frames".into()));
        }
        if data.iter().any(|row| row.len() != frames) {
            return Err(SignalError::InvalidChunk("ragged channel rows".into()));
        }
        let samples: Vec<f64> = data.into_iter().flatten().collect();
        Self::from_flat(start, sample_rate, seq, channels, samples)
    }

    /// `samples` is channel-major: channel 0's frames, then channel 1's, ...
    pub fn from_flat(
        start: Timestamp,
        sample_rate: f64,
        seq: u64,
        channels: usize,
        samples: Vec<f64>,
    ) -> Result<Self, SignalError> {
        if channels == 0 || samples.is_empty() || samples.len() % channels != 0 {
            return Err(SignalError::InvalidChunk(format!(
                "{} samples cannot form {channels} channels",
                samples.len()
            )));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(SignalError::InvalidChunk(format!("sample_rate {sample_rate}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalError::InvalidChunk(format!("non-finite sample at index {i}")));
        }
        let frames = samples.len() / channels;
        Ok(SignalChunk { start, sample_rate, seq, channels, frames, samples })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.samples[c * self.frames..(c + 1) * self.frames]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.samples[c * self.frames..(c + 1) * self.frames]
    }

    pub fn sample(&self, c: usize, frame: usize) -> f64 {
        self.samples[c * self.frames + frame]
    }

    pub fn duration_secs(&self) -> f64 {
        self.frames as f64 / self.sample_rate
    }

    /// Start time of the chunk that would follow this one without a gap.
    pub fn end(&self) -> Timestamp {
        self.start.at_frame(self.frames as u64, self.sample_rate)
    }

    pub fn frame_time(&self, frame: usize) -> Timestamp {
        self.start.at_frame(frame as u64, self.sample_rate)
    }

    /// True when `next` starts where this chunk ends (within 1 ns).
    pub fn is_contiguous_with(&self, next: &SignalChunk) -> bool {
        self.end().nanos().abs_diff(next.start.nanos()) <= 1
    }
}

/// Frames missing from a stream, e.g. after a corrupt log block.
impl BusPayload for SignalChunk {
    const KIND: PayloadKind = PayloadKind::SignalChunk;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapMarker {
    pub at: Timestamp,
    pub missing_frames: u64,
    pub reason: String,
}

/// Applies the per-channel derivation in `meta`. Timestamps are unchanged.
pub fn rematrix(chunk: &SignalChunk, meta: &DeviceMeta) -> Result<SignalChunk, SignalError> {
    if meta.derivation.len() != chunk.channels() {
        return Err(SignalError::BadIndex(format!(
            "{} derivations for {} channels",
            meta.derivation.len(),
            chunk.channels()
        )));
    }
    let n = chunk.channels();
    let frames = chunk.frames();
    let mut out = Vec::with_capacity(n * frames);
    for (c, d) in meta.derivation.iter().enumerate() {
        match *d {
            Derivation::Raw => out.extend_from_slice(chunk.channel(c)),
            Derivation::Referential { reference } => {
                if reference >= n {
                    return Err(SignalError::BadIndex(format!("reference {reference} >= {n}")));
                }
                let r = chunk.channel(reference);
                out.extend(chunk.channel(c).iter().zip(r).map(|(x, r)| x - r));
            }
            Derivation::Bipolar { pos, neg } => {
                if pos >= n || neg >= n || pos == neg {
                    return Err(SignalError::BadIndex(format!("bipolar ({pos}, {neg}) with {n} channels")));
                }
                let p = chunk.channel(pos);
                out.extend(p.iter().zip(chunk.channel(neg)).map(|(p, q)| p - q));
            }
        }
    }
    SignalChunk::from_flat(chunk.start, chunk.sample_rate, chunk.seq, n, out)
}
