//! Slow-wave threshold detection and phase-timed acoustic stimulation.

mod analysis;
mod pink;
mod scheduler;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{BandSpec, DspError, IirFilter};
use crate::msgbus::{BusPayload, PayloadKind};
use crate::signal_io::SignalChunk;
use crate::staging::SleepStage;
use crate::time::Timestamp;

pub use analysis::{
    event_locked_average, parse_stim_log, write_stim_log, ConditionAverage, EventLockedAverage, WaveSummary,
};
pub use pink::{gen_pink_noise, AudioBurst, PinkNoise};
pub use scheduler::{Fired, StimScheduler, MISSED_DEADLINE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwError {
    #[error("invalid stimulation config: {0}")]
    InvalidConfig(String),
    #[error("stimulus {seq} missed its deadline by {late_ms:.1} ms")]
    MissedDeadline { seq: u64, late_ms: f64 },
    #[error("no events with full window coverage")]
    NoEvents,
    #[error("stim log line {line}: {reason}")]
    BadLogLine { line: usize, reason: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StimMode {
    Active,
    Sham,
    Off,
}

impl StimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StimMode::Active => "Active",
            StimMode::Sham => "Sham",
            StimMode::Off => "Off",
        }
    }
}

impl std::str::FromStr for StimMode {
    type Err = SwError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "active" => Ok(StimMode::Active),
            "sham" => Ok(StimMode::Sham),
            "off" => Ok(StimMode::Off),
            _ => Err(SwError::InvalidConfig(format!("unknown stim mode {s:?}"))),
        }
    }
}

/// Mode an emitted stimulus was delivered under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeliveryMode {
    Active,
    Sham,
}

impl DeliveryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DeliveryMode::Active => "Active",
            DeliveryMode::Sham => "Sham",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AStimConfig {
    pub detect_band: BandSpec,
    /// Negative-going threshold in uV.
    pub threshold: f64,
    pub stim_delay: f64,
    pub stim_duration: f64,
    pub refractory: f64,
    pub gate_stages: BTreeSet<SleepStage>,
    pub mode: StimMode,
    pub audio_rate: u32,
    pub stim_level: f64,
    /// Channel of the rematrixed stream used for detection.
    pub detect_channel: usize,
}

impl Default for AStimConfig {
    fn default() -> Self {
        AStimConfig {
            detect_band: BandSpec::SWA,
            threshold: -40.0,
            stim_delay: 0.400,
            stim_duration: 0.050,
            refractory: 2.5,
            gate_stages: [SleepStage::N2, SleepStage::N3].into_iter().collect(),
            mode: StimMode::Active,
            audio_rate: 44_100,
            stim_level: 0.5,
            detect_channel: 0,
        }
    }
}

impl AStimConfig {
    pub fn validate(&self) -> Result<(), SwError> {
        let bad = |m: String| Err(SwError::InvalidConfig(m));
        if !(self.threshold < 0.0) {
            return bad(format!("threshold {} must be negative", self.threshold));
        }
        if !(self.stim_delay >= 0.0 && self.stim_duration > 0.0 && self.stim_duration < self.stim_delay + 1.0) {
            return bad(format!("stim_duration {} must lie in (0, stim_delay + 1 s)", self.stim_duration));
        }
        if !(self.refractory > self.stim_delay + self.stim_duration) {
            return bad(format!("refractory {} must exceed stim_delay + stim_duration", self.refractory));
        }
        if !(self.stim_level > 0.0 && self.stim_level <= 1.0) {
            return bad(format!("stim_level {} must lie in (0, 1]", self.stim_level));
        }
        if self.audio_rate == 0 {
            return bad("audio_rate must be positive".into());
        }
        Ok(())
    }

    pub fn delay(&self) -> Duration {
        Duration::from_nanos((self.stim_delay * 1e9).round() as u64)
    }

    pub fn burst_len(&self) -> usize {
        (self.stim_duration * self.audio_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimEvent {
    pub seq: u64,
    pub crossing_time: Timestamp,
    pub scheduled_time: Timestamp,
    /// Absent when the deadline was missed.
    pub delivered_time: Option<Timestamp>,
    pub mode_at_delivery: DeliveryMode,
    pub gate_stage: SleepStage,
}

impl StimEvent {
    pub fn error_secs(&self) -> Option<f64> {
        self.delivered_time.map(|d| d.secs_since(self.scheduled_time))
    }

    pub fn is_missed(&self) -> bool {
        self.delivered_time.is_none()
    }
}

impl BusPayload for StimEvent {
    const KIND: PayloadKind = PayloadKind::StimEvent;
}

/// Negative-going threshold detector over band-passed samples.
///
/// Crossing times are sub-sample interpolated and shifted by `compensation`
/// seconds (the filter's delay at 1 Hz).
#[derive(Debug, Clone)]
pub struct CrossingDetector {
    threshold: f64,
    refractory: f64,
    gate: BTreeSet<SleepStage>,
    compensation: f64,
    prev: Option<(Timestamp, f64)>,
    last_emitted: Option<Timestamp>,
}

impl CrossingDetector {
    pub fn new(cfg: &AStimConfig, compensation: f64) -> Self {
        CrossingDetector {
            threshold: cfg.threshold,
            refractory: cfg.refractory,
            gate: cfg.gate_stages.clone(),
            compensation,
            prev: None,
            last_emitted: None,
        }
    }

    pub fn compensation(&self) -> f64 {
        self.compensation
    }

    pub fn set_gate(&mut self, gate: BTreeSet<SleepStage>) {
        self.gate = gate;
    }

    #[inline]
    pub fn push(&mut self, t: Timestamp, x: f64, stage: SleepStage) -> Option<Timestamp> {
        let prev = self.prev.replace((t, x));
        let (t0, x0) = prev?;
        if !(x0 > self.threshold && self.threshold >= x) {
            return None;
        }
        if !self.gate.contains(&stage) {
            return None;
        }
        let frac = (x0 - self.threshold) / (x0 - x);
        let dt = t.secs_since(t0);
        let crossing = t0.offset_secs(frac * dt - self.compensation);
        if let Some(last) = self.last_emitted {
            if crossing.secs_since(last) < self.refractory {
                return None;
            }
        }
        self.last_emitted = Some(crossing);
        Some(crossing)
    }

    pub fn push_chunk(&mut self, filtered: &SignalChunk, channel: usize, stage: SleepStage) -> Vec<Timestamp> {
        filtered
            .channel(channel)
            .iter()
            .enumerate()
            .filter_map(|(f, &x)| self.push(filtered.frame_time(f), x, stage))
            .collect()
    }
}

/// Band-pass filter and crossing detector for one channel.
pub struct SlowWaveDetector {
    filter: IirFilter,
    crossings: CrossingDetector,
}

impl SlowWaveDetector {
    pub fn new(cfg: &AStimConfig, sample_rate: f64) -> Result<Self, SwError> {
        let filter = crate::dsp::design_bandpass(&cfg.detect_band, sample_rate)?;
        // A 1 Hz wave's threshold crossing is shifted by the carrier (phase) delay.
        let compensation = filter.phase_delay(1.0);
        Ok(SlowWaveDetector { filter, crossings: CrossingDetector::new(cfg, compensation) })
    }

    pub fn filter(&self) -> &IirFilter {
        &self.filter
    }

    pub fn detector_mut(&mut self) -> &mut CrossingDetector {
        &mut self.crossings
    }

    /// Filters one raw sample; returns the filtered value and any accepted crossing.
    #[inline]
    pub fn push(&mut self, t: Timestamp, raw: f64, stage: SleepStage) -> (f64, Option<Timestamp>) {
        let y = self.filter.process_sample(0, raw);
        (y, self.crossings.push(t, y, stage))
    }
}
