use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{DeliveryMode, StimEvent, SwError};
use crate::dsp::{design_bandpass, BandSpec};
use crate::staging::SleepStage;
use crate::time::Timestamp;

/// Extremes and absolute area (uV*s) of a filtered average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveSummary {
    pub min: f64,
    pub max: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAverage {
    pub count: usize,
    pub raw: Vec<f64>,
    /// Average of the band-passed recording.
    pub filtered: Vec<f64>,
    pub summary: WaveSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLockedAverage {
    pub sample_rate: f64,
    /// Offset of the first sample from the event, seconds.
    pub window_start: f64,
    pub active: Option<ConditionAverage>,
    pub sham: Option<ConditionAverage>,
}

impl EventLockedAverage {
    pub fn times(&self) -> Vec<f64> {
        let n = self.active.as_ref().or(self.sham.as_ref()).map_or(0, |c| c.raw.len());
        (0..n).map(|k| self.window_start + k as f64 / self.sample_rate).collect()
    }
}

fn average(segments: &[(&[f64], &[f64])], rate: f64) -> Option<ConditionAverage> {
    let first = segments.first()?;
    let len = first.0.len();
    let mut raw = vec![0.0; len];
    let mut filtered = vec![0.0; len];
    for (r, f) in segments {
        for k in 0..len {
            raw[k] += r[k];
            filtered[k] += f[k];
        }
    }
    let n = segments.len() as f64;
    raw.iter_mut().for_each(|v| *v /= n);
    filtered.iter_mut().for_each(|v| *v /= n);
    let summary = WaveSummary {
        min: filtered.iter().copied().fold(f64::INFINITY, f64::min),
        max: filtered.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        auc: filtered.iter().map(|v| v.abs()).sum::<f64>() / rate,
    };
    Some(ConditionAverage { count: segments.len(), raw, filtered, summary })
}

/// Averages `eeg` around each delivered event's scheduled time, per condition.
///
/// `window` is `[start, end]` in seconds relative to the event. The band-pass
/// runs causally over the whole recording before segmenting.
pub fn event_locked_average(
    eeg: &[f64],
    recording_start: Timestamp,
    sample_rate: f64,
    events: &[StimEvent],
    window: [f64; 2],
    band: &BandSpec,
) -> Result<EventLockedAverage, SwError> {
    let mut filter = design_bandpass(band, sample_rate)?;
    let mut filtered = eeg.to_vec();
    filter.process_slice(0, &mut filtered);
    let pre = (window[0] * sample_rate).round() as i64;
    let post = (window[1] * sample_rate).round() as i64;
    let mut active = Vec::new();
    let mut sham = Vec::new();
    for e in events.iter().filter(|e| !e.is_missed()) {
        let k0 = (e.scheduled_time.secs_since(recording_start) * sample_rate).round() as i64;
        let (a, b) = (k0 + pre, k0 + post);
        if a < 0 || b > eeg.len() as i64 || a >= b {
            continue;
        }
        let seg = (&eeg[a as usize..b as usize], &filtered[a as usize..b as usize]);
        match e.mode_at_delivery {
            DeliveryMode::Active => active.push(seg),
            DeliveryMode::Sham => sham.push(seg),
        }
    }
    if active.is_empty() && sham.is_empty() {
        return Err(SwError::NoEvents);
    }
    Ok(EventLockedAverage {
        sample_rate,
        window_start: pre as f64 / sample_rate,
        active: average(&active, sample_rate),
        sham: average(&sham, sample_rate),
    })
}

/// One tab-separated line per event: seq, crossing, scheduled, delivered or `MISSED`, mode, stage.
pub fn write_stim_log<W: Write>(mut out: W, events: &[StimEvent]) -> std::io::Result<()> {
    for e in events {
        let delivered = e.delivered_time.map_or_else(|| "MISSED".to_string(), |t| t.to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.seq,
            e.crossing_time,
            e.scheduled_time,
            delivered,
            e.mode_at_delivery.as_str(),
            e.gate_stage
        )?;
    }
    out.flush()
}

pub fn parse_stim_log(text: &str) -> Result<Vec<StimEvent>, SwError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |reason: &str| SwError::BadLogLine { line: i + 1, reason: reason.to_string() };
        let f: Vec<&str> = line.split('\t').collect();
        let [seq, crossing, scheduled, delivered, mode, stage] = f.as_slice() else {
            return Err(bad("expected six tab-separated fields"));
        };
        let time = |s: &str| s.parse::<Timestamp>().map_err(|_| bad("bad timestamp"));
        out.push(StimEvent {
            seq: seq.parse().map_err(|_| bad("bad sequence number"))?,
            crossing_time: time(crossing)?,
            scheduled_time: time(scheduled)?,
            delivered_time: if *delivered == "MISSED" { None } else { Some(time(delivered)?) },
            mode_at_delivery: match *mode {
                "Active" => DeliveryMode::Active,
                "Sham" => DeliveryMode::Sham,
                _ => return Err(bad("mode must be Active or Sham")),
            },
            gate_stage: stage.parse::<SleepStage>().map_err(|_| bad("bad stage"))?,
        });
    }
    Ok(out)
}
