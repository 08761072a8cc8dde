//! Deterministic synthetic sleeper with a closed-loop stimulus response.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::EPOCH_SECS;
use crate::msgbus::Subscription;
use crate::signal_io::{DeviceMeta, SignalChunk};
use crate::staging::{HypnogramRecord, SleepStage};
use crate::swdetect::{DeliveryMode, PinkNoise, StimEvent};
use crate::time::Timestamp;

pub const SIM_CHANNELS: usize = 5;
pub const SIM_RATE: f64 = 250.0;
const CHANNEL_GAINS: [f64; SIM_CHANNELS] = [1.0, 0.95, 0.9, 0.85, 0.8];
const CHANNEL_NOISE_UV: f64 = 3.0;
const BACKGROUND_UV: f64 = 10.0;
const PINK_ROWS: usize = 10;

/// Slow-wave cycle length in seconds; negative half first.
pub const SLOW_WAVE_SECS: f64 = 1.1;
const SLOW_WAVE_GAP_MAX: f64 = 0.3;
/// Peak-to-peak range of a slow wave in uV.
pub const SLOW_WAVE_P2P: (f64, f64) = (90.0, 150.0);

const SPINDLE_SECS: f64 = 1.0;
const SPINDLE_UV: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid night plan: {0}")]
    InvalidPlan(String),
    #[error("invalid stimulus response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NightPlan {
    /// Stages after the initial wake period, with durations in seconds.
    pub schedule: Vec<(SleepStage, f64)>,
    pub seed: u64,
    /// Length of the initial W period in seconds.
    pub sleep_onset_latency: f64,
}

impl NightPlan {
    pub fn single(stage: SleepStage, duration: f64, seed: u64) -> Self {
        NightPlan { schedule: vec![(stage, duration)], seed, sleep_onset_latency: 0.0 }
    }

    /// Cycles of N1, N2, N3 and REM after `sleep_onset_latency`, lasting `sleep_secs` in total.
    ///
    /// Durations are whole epochs; N3 shrinks and REM grows across cycles.
    pub fn typical(seed: u64, sleep_onset_latency: f64, sleep_secs: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_91a7);
        let mut epochs = |lo: u32, hi: u32| (rng.random_range(lo..=hi) as f64) * EPOCH_SECS;
        let mut schedule = Vec::new();
        let mut total = 0.0;
        let mut cycle = 0u32;
        while total < sleep_secs {
            let n3_scale = 1.0 / (1.0 + cycle as f64);
            let rem_scale = 1.0 + 0.5 * cycle as f64;
            let mut parts = vec![
                (SleepStage::N1, epochs(2, 4)),
                (SleepStage::N2, epochs(40, 60)),
                (SleepStage::N3, (epochs(30, 60) * n3_scale / EPOCH_SECS).round().max(4.0) * EPOCH_SECS),
                (SleepStage::N2, epochs(15, 30)),
                (SleepStage::Rem, (epochs(10, 20) * rem_scale / EPOCH_SECS).round() * EPOCH_SECS),
            ];
            if cycle > 0 {
                parts.insert(0, (SleepStage::W, epochs(2, 4)));
            }
            for (stage, d) in parts {
                let d = d.min(sleep_secs - total);
                if d <= 0.0 {
                    break;
                }
                schedule.push((stage, d));
                total += d;
            }
            cycle += 1;
        }
        NightPlan { schedule, seed, sleep_onset_latency }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.schedule.is_empty() {
            return Err(SimError::InvalidPlan("schedule is empty".into()));
        }
        if let Some((s, d)) = self.schedule.iter().find(|(_, d)| !(*d > 0.0 && d.is_finite())) {
            return Err(SimError::InvalidPlan(format!("{s} segment has duration {d}")));
        }
        if !(self.sleep_onset_latency >= 0.0 && self.sleep_onset_latency.is_finite()) {
            return Err(SimError::InvalidPlan(format!("sleep_onset_latency {}", self.sleep_onset_latency)));
        }
        Ok(())
    }

    /// Stage segments including the initial wake period.
    pub fn segments(&self) -> Vec<(SleepStage, f64)> {
        let mut out = Vec::with_capacity(self.schedule.len() + 1);
        if self.sleep_onset_latency > 0.0 {
            out.push((SleepStage::W, self.sleep_onset_latency));
        }
        out.extend(self.schedule.iter().copied());
        out
    }

    pub fn total_secs(&self) -> f64 {
        self.sleep_onset_latency + self.schedule.iter().map(|(_, d)| d).sum::<f64>()
    }

    pub fn stage_at(&self, secs: f64) -> SleepStage {
        let mut end = 0.0;
        let segments = self.segments();
        for &(stage, d) in &segments {
            end += d;
            if secs < end {
                return stage;
            }
        }
        segments.last().map_or(SleepStage::W, |s| s.0)
    }

    /// One record per complete epoch, labelled by the stage at the epoch midpoint.
    pub fn ground_truth(&self) -> Vec<HypnogramRecord> {
        let n = (self.total_secs() / EPOCH_SECS).floor() as u64;
        (0..n)
            .map(|i| HypnogramRecord {
                epoch_index: i,
                stage: self.stage_at((i as f64 + 0.5) * EPOCH_SECS),
                confidence: 1.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StimResponseModel {
    pub boost_factor: f64,
    pub boost_window: f64,
}

impl Default for StimResponseModel {
    fn default() -> Self {
        StimResponseModel { boost_factor: 1.2, boost_window: 2.0 }
    }
}

impl StimResponseModel {
    pub const NONE: StimResponseModel = StimResponseModel { boost_factor: 1.0, boost_window: 0.0 };

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.boost_factor >= 1.0) || !(self.boost_window >= 0.0) {
            return Err(SimError::InvalidResponse(format!(
                "boost_factor {} must be >= 1 and boost_window {} >= 0",
                self.boost_factor, self.boost_window
            )));
        }
        Ok(())
    }
}

/// One generated slow wave.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowWave {
    pub start: Timestamp,
    /// Half peak-to-peak amplitude before any boost, uV.
    pub amplitude: f64,
    pub boosted: bool,
}

impl SlowWave {
    /// Time at which the unfiltered wave first reaches `level` (negative, uV).
    pub fn crossing(&self, level: f64, boost: f64) -> Option<Timestamp> {
        let a = self.amplitude * if self.boosted { boost } else { 1.0 };
        (a >= -level).then(|| self.start.offset_secs(SLOW_WAVE_SECS / (2.0 * PI) * (-level / a).asin()))
    }
}

/// Event train generator for one stage-specific rhythm.
#[derive(Debug, Clone, Copy)]
struct Burst {
    start: u64,
    len: u64,
    amplitude: f64,
    freq: f64,
    phase: f64,
}

/// Streaming synthetic sleeper.
pub struct SubjectSim {
    plan: NightPlan,
    segments: Vec<(SleepStage, u64)>,
    segment: usize,
    segment_end: u64,
    response: StimResponseModel,
    rng: ChaCha8Rng,
    pink: PinkNoise,
    noise: Normal<f64>,
    frame: u64,
    total_frames: u64,
    chunk_frames: usize,
    seq: u64,
    wave: Option<(u64, f64, bool)>,
    next_wave: u64,
    spindle: Option<Burst>,
    next_spindle: u64,
    windows: VecDeque<(Timestamp, Timestamp)>,
    stim_feed: Option<Subscription<StimEvent>>,
    waves: Option<Vec<SlowWave>>,
    phase_offsets: [f64; 3],
}

impl SubjectSim {
    pub fn new(plan: NightPlan, response: StimResponseModel) -> Result<Self, SimError> {
        plan.validate()?;
        response.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let pink = PinkNoise::with_rows(rng.random(), PINK_ROWS);
        let phase_offsets = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        let mut bound = 0u64;
        let segments: Vec<(SleepStage, u64)> = plan
            .segments()
            .into_iter()
            .scan(0.0, |acc, (stage, d)| {
                *acc += d;
                Some((stage, (*acc * SIM_RATE).round() as u64))
            })
            .filter(|&(_, end)| {
                let keep = end > bound;
                bound = bound.max(end);
                keep
            })
            .collect();
        let total_frames = segments.last().map_or(0, |s| s.1);
        Ok(SubjectSim {
            segment_end: segments[0].1,
            segments,
            segment: 0,
            plan,
            response,
            rng,
            pink,
            noise: Normal::new(0.0, CHANNEL_NOISE_UV).expect("finite sd"),
            frame: 0,
            total_frames,
            chunk_frames: 25,
            seq: 0,
            wave: None,
            next_wave: 0,
            spindle: None,
            next_spindle: 0,
            windows: VecDeque::new(),
            stim_feed: None,
            waves: None,
            phase_offsets,
        })
    }

    pub fn with_chunk_frames(mut self, frames: usize) -> Self {
        self.chunk_frames = frames.max(1);
        self
    }

    /// Boosts follow delivered Active stimuli read from this subscription.
    pub fn with_stim_feed(mut self, feed: Subscription<StimEvent>) -> Self {
        self.stim_feed = Some(feed);
        self
    }

    /// Keeps a list of every generated slow wave.
    pub fn recording_waves(mut self) -> Self {
        self.waves = Some(Vec::new());
        self
    }

    pub fn waves(&self) -> &[SlowWave] {
        self.waves.as_deref().unwrap_or(&[])
    }

    pub fn plan(&self) -> &NightPlan {
        &self.plan
    }

    pub fn meta() -> DeviceMeta {
        DeviceMeta::dcm(SIM_CHANNELS, SIM_RATE)
    }

    pub fn total_frames(&self) -> u64 {
        self.total_frames
    }

    pub fn position(&self) -> Timestamp {
        Timestamp::ZERO.at_frame(self.frame, SIM_RATE)
    }

    /// Registers a stimulus; only delivered Active events in N2/N3 have an effect.
    pub fn apply_stim(&mut self, e: &StimEvent) {
        let Some(at) = e.delivered_time else { return };
        if e.mode_at_delivery != DeliveryMode::Active || self.response.boost_factor <= 1.0 {
            return;
        }
        let stage = self.plan.stage_at(e.scheduled_time.as_secs_f64());
        if matches!(stage, SleepStage::N2 | SleepStage::N3) {
            self.windows.push_back((at, at.offset_secs(self.response.boost_window)));
        }
    }

    fn poll_feed(&mut self) {
        let events: Vec<_> = self.stim_feed.as_ref().map(|f| f.drain()).unwrap_or_default();
        for env in events {
            self.apply_stim(&env.payload);
        }
    }

    fn boosted_at(&mut self, t: Timestamp) -> bool {
        while self.windows.front().is_some_and(|w| w.1 < t) {
            self.windows.pop_front();
        }
        self.windows.iter().any(|&(a, b)| a <= t && t <= b)
    }

    fn stage(&mut self) -> SleepStage {
        while self.frame >= self.segment_end && self.segment + 1 < self.segments.len() {
            self.segment += 1;
            self.segment_end = self.segments[self.segment].1;
        }
        self.segments[self.segment].0
    }

    fn slow_wave(&mut self, k: u64, active: bool) -> f64 {
        let period = (SLOW_WAVE_SECS * SIM_RATE).round() as u64;
        if active && self.wave.is_none() && k >= self.next_wave {
            let amplitude = self.rng.random_range(SLOW_WAVE_P2P.0..SLOW_WAVE_P2P.1) / 2.0;
            let gap = self.rng.random_range(0.0..SLOW_WAVE_GAP_MAX);
            self.next_wave = k + period + (gap * SIM_RATE).round() as u64;
            let start = Timestamp::ZERO.at_frame(k, SIM_RATE);
            let boosted = self.boosted_at(start);
            self.wave = Some((k, amplitude, boosted));
            if let Some(w) = self.waves.as_mut() {
                w.push(SlowWave { start, amplitude, boosted });
            }
        }
        let Some((start, amplitude, boosted)) = self.wave else {
            if !active {
                self.next_wave = self.next_wave.max(k);
            }
            return 0.0;
        };
        let s = k - start;
        if s >= period {
            self.wave = None;
            return self.slow_wave(k, active);
        }
        let a = if boosted { amplitude * self.response.boost_factor } else { amplitude };
        -a * (2.0 * PI * s as f64 / period as f64).sin()
    }

    fn spindle(&mut self, k: u64, active: bool) -> f64 {
        if active && self.spindle.is_none() && k >= self.next_spindle {
            let freq = self.rng.random_range(12.5..14.5);
            let phase = self.rng.random_range(0.0..2.0 * PI);
            let gap = self.rng.random_range(0.6..1.4);
            let len = (SPINDLE_SECS * SIM_RATE).round() as u64;
            self.next_spindle = k + len + (gap * SIM_RATE).round() as u64;
            self.spindle = Some(Burst { start: k, len, amplitude: SPINDLE_UV, freq, phase });
        }
        let Some(b) = self.spindle else { return 0.0 };
        let s = k - b.start;
        if s >= b.len {
            self.spindle = None;
            return 0.0;
        }
        let env = 0.5 * (1.0 - (2.0 * PI * s as f64 / b.len as f64).cos());
        b.amplitude * env * (2.0 * PI * b.freq * s as f64 / SIM_RATE + b.phase).sin()
    }

    /// Common source signal at frame `k` for `stage`.
    fn common(&mut self, k: u64, stage: SleepStage) -> f64 {
        let t = k as f64 / SIM_RATE;
        let bg = self.pink.next_sample() * (BACKGROUND_UV / self.pink.std_dev());
        let [pa, pt, pb] = self.phase_offsets;
        let alpha = |a: f64| a * (2.0 * PI * 10.0 * t + pa).sin();
        let theta = |a: f64| a * (2.0 * PI * 6.0 * t + pt).sin();
        let beta = |a: f64| a * (2.0 * PI * 20.0 * t + pb).sin();
        let rhythm = match stage {
            SleepStage::W => alpha(30.0 * 2f64.sqrt()),
            SleepStage::N1 => theta(40.0),
            SleepStage::N2 => theta(30.0),
            SleepStage::N3 => theta(10.0),
            SleepStage::Rem => theta(20.0) + beta(10.0),
        };
        let sw = self.slow_wave(k, stage == SleepStage::N3);
        let sp = self.spindle(k, stage == SleepStage::N2);
        bg + rhythm + sw + sp
    }

    fn generate(&mut self, frames: usize) -> SignalChunk {
        let start = Timestamp::ZERO.at_frame(self.frame, SIM_RATE);
        let mut samples = vec![0.0; SIM_CHANNELS * frames];
        for f in 0..frames {
            let stage = self.stage();
            let common = self.common(self.frame, stage);
            for (c, gain) in CHANNEL_GAINS.iter().enumerate() {
                samples[c * frames + f] = gain * common + self.noise.sample(&mut self.rng);
            }
            self.frame += 1;
        }
        let chunk = SignalChunk::from_flat(start, SIM_RATE, self.seq, SIM_CHANNELS, samples).expect("finite samples");
        self.seq += 1;
        chunk
    }
}

impl Iterator for SubjectSim {
    type Item = SignalChunk;

    fn next(&mut self) -> Option<SignalChunk> {
        if self.frame >= self.total_frames {
            return None;
        }
        self.poll_feed();
        let frames = (self.total_frames - self.frame).min(self.chunk_frames as u64) as usize;
        Some(self.generate(frames))
    }
}

/// Open-loop synthesis of one stage.
pub fn synth_stage_eeg(stage: SleepStage, duration: f64, seed: u64) -> Result<Vec<SignalChunk>, SimError> {
    Ok(SubjectSim::new(NightPlan::single(stage, duration, seed), StimResponseModel::NONE)?.collect())
}

/// Concatenates one channel of a chunk sequence.
pub fn channel_samples(chunks: &[SignalChunk], channel: usize) -> Vec<f64> {
    chunks.iter().flat_map(|c| c.channel(channel).iter().copied()).collect()
}
