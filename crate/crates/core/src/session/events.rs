use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SessionConfig, SessionError};
use crate::msgbus::{BusPayload, PayloadKind};
use crate::staging::SleepStage;
use crate::swdetect::{AStimConfig, DeliveryMode, StimEvent};
use crate::thermal::{ThermalConfig, ThermalPhase};
use crate::time::Timestamp;

/// One audit record. `(at, seq)` strictly increases through a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub at: Timestamp,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl BusPayload for SessionEvent {
    const KIND: PayloadKind = PayloadKind::SessionEvent;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    SessionStart {
        session_id: String,
        config: Box<SessionConfig>,
        channel_count: usize,
        sample_rate: f64,
    },
    SessionStop {
        reason: StopReason,
        epochs_scored: u64,
    },
    StageChange {
        epoch_index: u64,
        from: Option<SleepStage>,
        to: SleepStage,
        confidence: f64,
    },
    SleepOnset {
        onset_epoch: u64,
        onset_time: Timestamp,
    },
    StimDelivered {
        event: StimEvent,
    },
    StimMissed {
        event: StimEvent,
        late_ms: f64,
    },
    ThermalPhaseChange {
        from: ThermalPhase,
        to: ThermalPhase,
        setpoint: f64,
    },
    ConfigChange {
        command: String,
        before: ConfigSnapshot,
        after: ConfigSnapshot,
    },
    /// Free text from the operator.
    OperatorNote {
        text: String,
    },
    Gap {
        missing_frames: u64,
        reason: String,
    },
    Error {
        message: String,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SessionStart { .. } => "session_start",
            EventKind::SessionStop { .. } => "session_stop",
            EventKind::StageChange { .. } => "stage_change",
            EventKind::SleepOnset { .. } => "sleep_onset",
            EventKind::StimDelivered { .. } => "stim_delivered",
            EventKind::StimMissed { .. } => "stim_missed",
            EventKind::ThermalPhaseChange { .. } => "thermal_phase_change",
            EventKind::ConfigChange { .. } => "config_change",
            EventKind::OperatorNote { .. } => "operator_note",
            EventKind::Gap { .. } => "gap",
            EventKind::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndOfRecording,
    Operator,
    SourceError,
}

/// Effector settings an operator can change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub astim: AStimConfig,
    pub thermal: ThermalConfig,
}

// `,"crc":"xxxxxxxx"}`
const CRC_SUFFIX_LEN: usize = 18;

/// Serializes `event` as one log line (without the newline).
///
/// The checksum is crc32 over the record as it would read without the `crc` field.
pub fn encode_record(event: &SessionEvent) -> String {
    let body = serde_json::to_string(event).expect("session events always serialize");
    let crc = crc32fast::hash(body.as_bytes());
    let mut line = body;
    line.pop();
    line.push_str(&format!(",\"crc\":\"{crc:08x}\"}}"));
    line
}

/// Why a line was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordFault {
    MissingCrc,
    CrcMismatch { stored: u32, computed: u32 },
    Malformed(String),
}

pub fn decode_record(line: &str) -> Result<SessionEvent, RecordFault> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.len() < CRC_SUFFIX_LEN + 2 || !line.is_char_boundary(line.len() - CRC_SUFFIX_LEN) {
        return Err(RecordFault::MissingCrc);
    }
    let (head, tail) = line.split_at(line.len() - CRC_SUFFIX_LEN);
    let hex = tail
        .strip_prefix(",\"crc\":\"")
        .and_then(|t| t.strip_suffix("\"}"))
        .ok_or(RecordFault::MissingCrc)?;
    let stored = u32::from_str_radix(hex, 16).map_err(|_| RecordFault::MissingCrc)?;
    let body = format!("{head}}}");
    let computed = crc32fast::hash(body.as_bytes());
    if stored != computed {
        return Err(RecordFault::CrcMismatch { stored, computed });
    }
    serde_json::from_str(&body).map_err(|e| RecordFault::Malformed(e.to_string()))
}

/// Append-only writer; every record is flushed before `append` returns.
pub struct EventLog {
    out: File,
    path: PathBuf,
    next_seq: u64,
    last_at: Timestamp,
}

impl EventLog {
    pub fn create(path: &Path) -> Result<Self, SessionError> {
        let out = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(path)
            .map_err(|e| SessionError::io(path, e))?;
        Ok(EventLog { out, path: path.to_path_buf(), next_seq: 0, last_at: Timestamp::ZERO })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Stamps, persists and returns the event. `at` is clamped so the log stays ordered.
    pub fn append(&mut self, at: Timestamp, kind: EventKind) -> Result<SessionEvent, SessionError> {
        let at = at.max(self.last_at);
        let event = SessionEvent { seq: self.next_seq, at, kind };
        let mut line = encode_record(&event);
        line.push('\n');
        self.out.write_all(line.as_bytes()).map_err(|e| SessionError::io(&self.path, e))?;
        self.out.flush().map_err(|e| SessionError::io(&self.path, e))?;
        self.next_seq += 1;
        self.last_at = at;
        Ok(event)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub events: Vec<SessionEvent>,
    /// 1-based line number of the first unreadable record, if reading stopped early.
    pub stopped_at_line: Option<usize>,
    pub fault: Option<RecordFault>,
}

impl LogContents {
    pub fn is_complete(&self) -> bool {
        self.stopped_at_line.is_none()
    }
}

/// Reads records up to the first damaged or out-of-order line.
pub fn parse_event_log(text: &str) -> LogContents {
    let mut events: Vec<SessionEvent> = Vec::new();
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        let line = line.trim_end_matches('\n');
        if line.is_empty() && complete {
            continue;
        }
        let fault = match decode_record(line) {
            Ok(e) => {
                let ordered = events.last().is_none_or(|p| (p.at, p.seq) < (e.at, e.seq));
                if ordered {
                    events.push(e);
                    continue;
                }
                RecordFault::Malformed("record out of order".into())
            }
            Err(f) => f,
        };
        return LogContents { events, stopped_at_line: Some(i + 1), fault: Some(fault) };
    }
    LogContents { events, stopped_at_line: None, fault: None }
}

pub fn read_event_log(path: &Path) -> Result<LogContents, SessionError> {
    let mut text = String::new();
    let mut reader = BufReader::new(File::open(path).map_err(|e| SessionError::io(path, e))?);
    // Tolerate a torn final write that split a UTF-8 sequence.
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|e| SessionError::io(path, e))?;
        if n == 0 {
            break;
        }
        text.push_str(&String::from_utf8_lossy(&buf));
    }
    Ok(parse_event_log(&text))
}

/// Counters that the live status and the persisted log must agree on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionCounters {
    pub events: u64,
    pub epochs_scored: u64,
    pub current_stage: Option<SleepStage>,
    pub onset_epoch: Option<u64>,
    pub stim_delivered: u64,
    pub stim_delivered_active: u64,
    pub stim_delivered_sham: u64,
    pub stim_missed: u64,
    pub stage_changes: u64,
    pub thermal_phase: Option<ThermalPhase>,
    pub config_changes: u64,
    pub notes: u64,
    pub gaps: u64,
    pub missing_frames: u64,
    pub errors: u64,
    pub stopped: Option<StopReason>,
}

impl SessionCounters {
    pub fn apply(&mut self, e: &SessionEvent) {
        self.events += 1;
        match &e.kind {
            EventKind::SessionStart { .. } => self.thermal_phase = Some(ThermalPhase::Neutral),
            EventKind::SessionStop { reason, epochs_scored } => {
                self.stopped = Some(*reason);
                self.epochs_scored = *epochs_scored;
            }
            EventKind::StageChange { epoch_index, to, .. } => {
                self.stage_changes += 1;
                self.current_stage = Some(*to);
                self.epochs_scored = self.epochs_scored.max(epoch_index + 1);
            }
            EventKind::SleepOnset { onset_epoch, .. } => self.onset_epoch = Some(*onset_epoch),
            EventKind::StimDelivered { event } => {
                self.stim_delivered += 1;
                match event.mode_at_delivery {
                    DeliveryMode::Active => self.stim_delivered_active += 1,
                    DeliveryMode::Sham => self.stim_delivered_sham += 1,
                }
            }
            EventKind::StimMissed { .. } => self.stim_missed += 1,
            EventKind::ThermalPhaseChange { to, .. } => self.thermal_phase = Some(*to),
            EventKind::ConfigChange { .. } => self.config_changes += 1,
            EventKind::OperatorNote { .. } => self.notes += 1,
            EventKind::Gap { missing_frames, .. } => {
                self.gaps += 1;
                self.missing_frames += missing_frames;
            }
            EventKind::Error { .. } => self.errors += 1,
        }
    }
}

/// Rebuilds the counters from persisted records alone.
pub fn reconstruct(events: &[SessionEvent]) -> SessionCounters {
    let mut c = SessionCounters::default();
    for e in events {
        c.apply(e);
    }
    c
}
