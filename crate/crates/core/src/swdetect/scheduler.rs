use std::collections::VecDeque;
use std::time::Duration;

use super::{AStimConfig, AudioBurst, DeliveryMode, PinkNoise, StimEvent, StimMode, SwError};
use crate::staging::SleepStage;
use crate::time::Timestamp;

/// Lateness beyond which a stimulus is dropped instead of delivered.
pub const MISSED_DEADLINE: Duration = Duration::from_millis(20);

/// Outcome of one due stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct Fired {
    pub event: StimEvent,
    /// Present only for delivered Active stimuli.
    pub audio: Option<AudioBurst>,
    pub missed: Option<SwError>,
}

#[derive(Debug, Clone)]
struct Pending {
    seq: u64,
    crossing: Timestamp,
    due: Timestamp,
    stage: SleepStage,
}

/// Time-ordered queue of accepted crossings waiting for their delivery time.
pub struct StimScheduler {
    cfg: AStimConfig,
    pending: VecDeque<Pending>,
    next_seq: u64,
    last_delivered: Option<Timestamp>,
    noise: PinkNoise,
}

impl StimScheduler {
    pub fn new(cfg: AStimConfig, seed: u64) -> Self {
        let noise = PinkNoise::new(seed);
        StimScheduler { cfg, pending: VecDeque::new(), next_seq: 0, last_delivered: None, noise }
    }

    pub fn config(&self) -> &AStimConfig {
        &self.cfg
    }

    pub fn set_mode(&mut self, mode: StimMode) {
        self.cfg.mode = mode;
        if mode == StimMode::Off {
            self.pending.clear();
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Earliest time at which [`poll`](Self::poll) has work.
    pub fn next_due(&self) -> Option<Timestamp> {
        self.pending.front().map(|p| self.fire_time(p))
    }

    fn fire_time(&self, p: &Pending) -> Timestamp {
        // Keep delivered stimuli at least one refractory period apart.
        match self.last_delivered {
            Some(last) => p.due.max(last.offset_secs(self.cfg.refractory)),
            None => p.due,
        }
    }

    /// Queues a stimulus for `crossing + stim_delay`; returns its sequence number.
    pub fn schedule(&mut self, crossing: Timestamp, stage: SleepStage) -> Option<u64> {
        if self.cfg.mode == StimMode::Off {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let due = crossing + self.cfg.delay();
        let at = self.pending.partition_point(|p| p.due <= due);
        self.pending.insert(at, Pending { seq, crossing, due, stage });
        Some(seq)
    }

    /// Emits every stimulus due at or before `now`.
    pub fn poll(&mut self, now: Timestamp) -> Vec<Fired> {
        let mut out = Vec::new();
        while let Some(p) = self.pending.front() {
            if self.fire_time(p) > now {
                break;
            }
            let p = self.pending.pop_front().expect("front exists");
            let mode = match self.cfg.mode {
                StimMode::Active => DeliveryMode::Active,
                StimMode::Sham => DeliveryMode::Sham,
                StimMode::Off => continue,
            };
            let late = now.saturating_duration_since(p.due);
            let mut event = StimEvent {
                seq: p.seq,
                crossing_time: p.crossing,
                scheduled_time: p.due,
                delivered_time: None,
                mode_at_delivery: mode,
                gate_stage: p.stage,
            };
            if late > MISSED_DEADLINE {
                let missed = SwError::MissedDeadline { seq: p.seq, late_ms: late.as_secs_f64() * 1e3 };
                out.push(Fired { event, audio: None, missed: Some(missed) });
                continue;
            }
            event.delivered_time = Some(now);
            self.last_delivered = Some(now);
            let audio = (mode == DeliveryMode::Active).then(|| AudioBurst {
                seq: p.seq,
                at: now,
                audio_rate: self.cfg.audio_rate,
                samples: self.noise.burst(self.cfg.stim_duration, self.cfg.audio_rate, self.cfg.stim_level),
            });
            out.push(Fired { event, audio, missed: None });
        }
        out
    }
}
