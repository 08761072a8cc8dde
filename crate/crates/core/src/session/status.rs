use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{SessionCounters, StopReason};
use crate::dsp::{design_lowpass, IirFilter};
use crate::msgbus::GraphStats;
use crate::signal_io::SignalChunk;
use crate::staging::{HypnogramRecord, SleepStage};
use crate::swdetect::{StimEvent, StimMode};
use crate::thermal::{ThermalConfig, ThermalState};
use crate::time::Timestamp;

/// Highest per-channel rate sent to the console.
pub const MAX_DISPLAY_RATE: f64 = 64.0;
pub const DISPLAY_WINDOW_SECS: f64 = 120.0;
const RECENT_STIMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    #[default]
    Idle,
    Starting,
    Running,
    Stopped,
    Failed,
}

/// Anti-aliased, decimated copy of the most recent EEG.
#[derive(Debug, Clone)]
pub struct EegDecimator {
    factor: usize,
    phase: usize,
    filter: Option<IirFilter>,
    out_rate: f64,
    capacity: usize,
    channels: Vec<VecDeque<f32>>,
    last_time: Option<Timestamp>,
}

impl EegDecimator {
    pub fn new(sample_rate: f64, channels: usize) -> Self {
        let factor = (sample_rate / MAX_DISPLAY_RATE).ceil().max(1.0) as usize;
        let out_rate = sample_rate / factor as f64;
        // Butterworth at 80% of the output Nyquist; 4th order gives ~-24 dB at the fold.
        let filter = (factor > 1).then(|| design_lowpass(0.4 * out_rate, 4, sample_rate).ok()).flatten();
        let capacity = (DISPLAY_WINDOW_SECS * out_rate).round() as usize;
        EegDecimator {
            factor,
            phase: 0,
            filter,
            out_rate,
            capacity,
            channels: vec![VecDeque::with_capacity(capacity); channels],
            last_time: None,
        }
    }

    pub fn out_rate(&self) -> f64 {
        self.out_rate
    }

    pub fn push_chunk(&mut self, chunk: &SignalChunk) {
        let n = chunk.channels().min(self.channels.len());
        for f in 0..chunk.frames() {
            let keep = self.phase == 0;
            for c in 0..n {
                let x = chunk.sample(c, f);
                let y = match &mut self.filter {
                    Some(filt) => filt.process_sample(c, x),
                    None => x,
                };
                if keep {
                    let q = &mut self.channels[c];
                    if q.len() == self.capacity {
                        q.pop_front();
                    }
                    q.push_back(y as f32);
                }
            }
            if keep {
                self.last_time = Some(chunk.frame_time(f));
            }
            self.phase = (self.phase + 1) % self.factor;
        }
    }

    pub fn snapshot(&self, labels: &[String]) -> EegBuffer {
        let len = self.channels.first().map_or(0, VecDeque::len);
        let start = self
            .last_time
            .map(|t| t.offset_secs(-((len.max(1) - 1) as f64) / self.out_rate));
        EegBuffer {
            sample_rate: self.out_rate,
            start,
            labels: labels.to_vec(),
            channels: self.channels.iter().map(|q| q.iter().copied().collect()).collect(),
        }
    }
}

/// Downsampled EEG window, one row per channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EegBuffer {
    pub sample_rate: f64,
    /// Graph time of the first sample.
    pub start: Option<Timestamp>,
    pub labels: Vec<String>,
    pub channels: Vec<Vec<f32>>,
}

impl EegBuffer {
    pub fn is_empty(&self) -> bool {
        self.channels.iter().all(Vec::is_empty)
    }
}

/// Consistent view of a session, taken between graph steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub state: SessionState,
    pub session_id: Option<String>,
    /// Graph time of the last processed step.
    pub graph_time: Timestamp,
    pub current_stage: Option<SleepStage>,
    pub epochs_scored: u64,
    pub onset_epoch: Option<u64>,
    pub stim_delivered: u64,
    pub stim_delivered_active: u64,
    pub stim_delivered_sham: u64,
    pub stim_missed: u64,
    pub astim_mode: Option<StimMode>,
    pub thermal: Option<ThermalState>,
    pub thermal_config: Option<ThermalConfig>,
    pub recent_stims: Vec<StimEvent>,
    pub hypnogram: Vec<HypnogramRecord>,
    pub eeg: EegBuffer,
    pub graph_stats: GraphStats,
    pub events_logged: u64,
    pub stage_changes: u64,
    pub config_changes: u64,
    pub notes: u64,
    pub gaps: u64,
    pub missing_frames: u64,
    pub errors: u64,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
    /// Wall-clock seconds since the session started.
    pub wall_elapsed: f64,
}

impl StatusReport {
    pub(crate) fn push_stim(&mut self, e: &StimEvent) {
        if self.recent_stims.len() == RECENT_STIMS {
            self.recent_stims.remove(0);
        }
        self.recent_stims.push(e.clone());
    }

    /// The counters a replay of the event log must reproduce.
    pub fn terminal_counters(&self) -> SessionCounters {
        SessionCounters {
            events: self.events_logged,
            epochs_scored: self.epochs_scored,
            current_stage: self.current_stage,
            onset_epoch: self.onset_epoch,
            stim_delivered: self.stim_delivered,
            stim_delivered_active: self.stim_delivered_active,
            stim_delivered_sham: self.stim_delivered_sham,
            stim_missed: self.stim_missed,
            stage_changes: self.stage_changes,
            thermal_phase: self.thermal.map(|t| t.phase),
            config_changes: self.config_changes,
            notes: self.notes,
            gaps: self.gaps,
            missing_frames: self.missing_frames,
            errors: self.errors,
            stopped: self.stop_reason,
        }
    }

    /// Same report without the bulky buffers.
    pub fn summary(&self) -> StatusReport {
        StatusReport { eeg: EegBuffer::default(), hypnogram: Vec::new(), recent_stims: Vec::new(), ..self.clone() }
    }
}
