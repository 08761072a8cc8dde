//! Epoch-by-epoch sleep staging, hypnogram smoothing and sleep-onset detection.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{EpochFeatures, EPOCH_SECS};
use crate::msgbus::{BusPayload, PayloadKind};
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum StagingError {
    #[error("unknown sleep stage {0:?}")]
    UnknownStage(String),
    #[error("hypnogram line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("hypnogram io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    W,
    N1,
    N2,
    N3,
    #[serde(rename = "REM")]
    Rem,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [SleepStage::W, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];

    pub fn as_str(self) -> &'static str {
        match self {
            SleepStage::W => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "REM",
        }
    }

    pub fn is_wake(self) -> bool {
        self == SleepStage::W
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SleepStage {
    type Err = StagingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SleepStage::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| StagingError::UnknownStage(s.to_string()))
    }
}

/// Output of a stager for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageDecision {
    pub stage: SleepStage,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypnogramEpoch {
    pub epoch_index: u64,
    pub epoch_start: Timestamp,
    pub stage_raw: SleepStage,
    pub stage_smoothed: SleepStage,
    pub confidence: f64,
    pub features: EpochFeatures,
}

impl HypnogramEpoch {
    /// Graph time at which the epoch closed.
    pub fn epoch_end(&self) -> Timestamp {
        self.epoch_start.offset_secs(EPOCH_SECS)
    }
}

impl BusPayload for HypnogramEpoch {
    const KIND: PayloadKind = PayloadKind::HypnogramEpoch;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SleepOnset {
    pub onset_epoch: u64,
    pub onset_time: Timestamp,
}

/// Anything that maps epoch features to a stage.
pub trait Stager: Send {
    fn classify_epoch(&mut self, features: &EpochFeatures) -> StageDecision;
}

/// Cut-offs for the baseline rules. Powers in uV^2, ratios are fractions of total power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleThresholds {
    pub swa_min: f64,
    pub swa_ratio: f64,
    pub rem_beta_ratio: f64,
    pub rem_rms_max: f64,
    /// Sigma over theta power for N2.
    pub spindle_ratio: f64,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        RuleThresholds { swa_min: 1000.0, swa_ratio: 0.5, rem_beta_ratio: 0.06, rem_rms_max: 22.0, spindle_ratio: 0.1 }
    }
}

/// Band-power rule cascade: N3, REM, N2, N1, then W.
#[derive(Debug, Clone, Default)]
pub struct RuleBasedStager {
    pub thresholds: RuleThresholds,
}

fn log_ratio(a: f64, b: f64) -> f64 {
    const EPS: f64 = 1e-12;
    ((a + EPS) / (b + EPS)).ln()
}

fn squash(margin: f64) -> f64 {
    (margin.max(0.0) / 2.0).tanh()
}

impl RuleBasedStager {
    pub fn new(thresholds: RuleThresholds) -> Self {
        RuleBasedStager { thresholds }
    }

    pub fn classify(&self, f: &EpochFeatures) -> StageDecision {
        let th = &self.thresholds;
        let total = f.total_power;
        let (swa, theta, alpha, beta, delta) = (f.swa(), f.theta(), f.alpha(), f.beta(), f.delta());
        // Each rule passes when all of its log-margins are positive; the smallest is its confidence statistic.
        let n3 = log_ratio(swa, th.swa_min).min(log_ratio(swa, th.swa_ratio * total));
        if n3 >= 0.0 {
            return StageDecision { stage: SleepStage::N3, confidence: squash(n3) };
        }
        let theta_dom = log_ratio(theta, alpha.max(beta).max(delta));
        let rem = theta_dom.min(log_ratio(beta, th.rem_beta_ratio * total)).min(log_ratio(th.rem_rms_max, f.rms));
        if rem >= 0.0 {
            return StageDecision { stage: SleepStage::Rem, confidence: squash(rem) };
        }
        let n2 = theta_dom.min(log_ratio(f.sigma_power, th.spindle_ratio * theta));
        if n2 >= 0.0 {
            return StageDecision { stage: SleepStage::N2, confidence: squash(n2) };
        }
        let n1 = log_ratio(theta, alpha);
        if n1 > 0.0 {
            return StageDecision { stage: SleepStage::N1, confidence: squash(n1) };
        }
        StageDecision { stage: SleepStage::W, confidence: squash(-n1) }
    }
}

impl Stager for RuleBasedStager {
    fn classify_epoch(&mut self, features: &EpochFeatures) -> StageDecision {
        self.classify(features)
    }
}

/// Stager living in another process, reached over TCP with one JSON line per epoch.
///
/// Request: the [`EpochFeatures`] object. Reply: `{"stage": "N2", "confidence": 0.8}`.
/// Any failure answers the previous stage with confidence 0.
pub struct ExternalStager {
    endpoint: String,
    timeout: Duration,
    conn: Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>,
    last: SleepStage,
}

impl ExternalStager {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ExternalStager { endpoint: endpoint.into(), timeout: Duration::from_secs(5), conn: None, last: SleepStage::W }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn connect(&self) -> std::io::Result<(BufReader<TcpStream>, BufWriter<TcpStream>)> {
        let addr = self
            .endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "endpoint did not resolve"))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        Ok((BufReader::new(stream.try_clone()?), BufWriter::new(stream)))
    }

    fn exchange(&mut self, features: &EpochFeatures) -> Result<StageDecision, String> {
        if self.conn.is_none() {
            self.conn = Some(self.connect().map_err(|e| e.to_string())?);
        }
        let (reader, writer) = self.conn.as_mut().expect("connected above");
        serde_json::to_writer(&mut *writer, features).map_err(|e| e.to_string())?;
        writer.write_all(b"\n").and_then(|_| writer.flush()).map_err(|e| e.to_string())?;
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(|e| e.to_string())? == 0 {
            return Err("stager closed the connection".into());
        }
        let d: StageDecision = serde_json::from_str(line.trim()).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(format!("confidence {} outside [0, 1]", d.confidence));
        }
        Ok(d)
    }
}

impl Stager for ExternalStager {
    fn classify_epoch(&mut self, features: &EpochFeatures) -> StageDecision {
        match self.exchange(features) {
            Ok(d) => {
                self.last = d.stage;
                d
            }
            Err(e) => {
                warn!("external stager {}: {e}", self.endpoint);
                self.conn = None;
                StageDecision { stage: self.last, confidence: 0.0 }
            }
        }
    }
}

/// Majority-of-three hypnogram smoother.
#[derive(Debug, Clone, Default)]
pub struct Smoother {
    window: Vec<SleepStage>,
    prev: Option<SleepStage>,
}

impl Smoother {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, raw: SleepStage) -> SleepStage {
        if self.window.len() == 3 {
            self.window.remove(0);
        }
        self.window.push(raw);
        let out = match (self.window.as_slice(), self.prev) {
            ([a, b, c], Some(prev)) => {
                if a == b || a == c {
                    *a
                } else if b == c {
                    *b
                } else {
                    prev
                }
            }
            _ => raw,
        };
        self.prev = Some(out);
        out
    }
}

pub fn smooth_hypnogram(raw: &[SleepStage]) -> Vec<SleepStage> {
    let mut s = Smoother::new();
    raw.iter().map(|&r| s.push(r)).collect()
}

/// Emits the first epoch of the first run of two non-W epochs, once.
#[derive(Debug, Clone, Default)]
pub struct OnsetDetector {
    run_start: Option<u64>,
    fired: bool,
}

impl OnsetDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_fired(&self) -> bool {
        self.fired
    }

    /// Feeds the smoothed stage of `epoch_index`; returns the onset epoch when first confirmed.
    pub fn push(&mut self, epoch_index: u64, smoothed: SleepStage) -> Option<u64> {
        if self.fired {
            return None;
        }
        if smoothed.is_wake() {
            self.run_start = None;
            return None;
        }
        let start = *self.run_start.get_or_insert(epoch_index);
        if epoch_index > start {
            self.fired = true;
            return Some(start);
        }
        None
    }
}

pub fn detect_sleep_onset(smoothed: &[SleepStage]) -> Option<SleepOnset> {
    let mut d = OnsetDetector::new();
    smoothed.iter().enumerate().find_map(|(i, &s)| {
        d.push(i as u64, s)
            .map(|e| SleepOnset { onset_epoch: e, onset_time: Timestamp::from_secs_f64(e as f64 * EPOCH_SECS) })
    })
}

/// Stager, smoother and onset detector chained over the epoch stream.
pub struct StagingPipeline {
    stager: Box<dyn Stager>,
    smoother: Smoother,
    onset: OnsetDetector,
    session_start: Timestamp,
    last_smoothed: Option<SleepStage>,
    last_raw: SleepStage,
}

impl StagingPipeline {
    pub fn new(stager: Box<dyn Stager>, session_start: Timestamp) -> Self {
        StagingPipeline {
            stager,
            smoother: Smoother::new(),
            onset: OnsetDetector::new(),
            session_start,
            last_smoothed: None,
            last_raw: SleepStage::W,
        }
    }

    pub fn current_stage(&self) -> Option<SleepStage> {
        self.last_smoothed
    }

    pub fn push(&mut self, features: EpochFeatures) -> (HypnogramEpoch, Option<SleepOnset>) {
        let decision = if features.quality_flagged {
            StageDecision { stage: self.last_raw, confidence: 0.0 }
        } else {
            let d = self.stager.classify_epoch(&features);
            StageDecision { stage: d.stage, confidence: d.confidence.clamp(0.0, 1.0) }
        };
        self.last_raw = decision.stage;
        let smoothed = self.smoother.push(decision.stage);
        self.last_smoothed = Some(smoothed);
        let onset = self.onset.push(features.epoch_index, smoothed).map(|e| SleepOnset {
            onset_epoch: e,
            onset_time: self.session_start.offset_secs(e as f64 * EPOCH_SECS),
        });
        let epoch = HypnogramEpoch {
            epoch_index: features.epoch_index,
            epoch_start: features.epoch_start,
            stage_raw: decision.stage,
            stage_smoothed: smoothed,
            confidence: decision.confidence,
            features,
        };
        (epoch, onset)
    }
}

/// One line of the hypnogram text format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypnogramRecord {
    pub epoch_index: u64,
    pub stage: SleepStage,
    pub confidence: f64,
}

impl fmt::Display for HypnogramRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{:.4}", self.epoch_index, self.stage, self.confidence)
    }
}

impl From<&HypnogramEpoch> for HypnogramRecord {
    fn from(e: &HypnogramEpoch) -> Self {
        HypnogramRecord { epoch_index: e.epoch_index, stage: e.stage_smoothed, confidence: e.confidence }
    }
}

pub fn write_hypnogram<W: Write>(mut out: W, records: &[HypnogramRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{r}")?;
    }
    out.flush()
}

pub fn export_hypnogram(path: &Path, records: &[HypnogramRecord]) -> Result<(), StagingError> {
    let io = |source| StagingError::Io { path: path.display().to_string(), source };
    let f = std::fs::File::create(path).map_err(io)?;
    write_hypnogram(BufWriter::new(f), records).map_err(io)
}

pub fn parse_hypnogram(text: &str) -> Result<Vec<HypnogramRecord>, StagingError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| StagingError::BadLine { line: i + 1, reason: reason.to_string() };
        let mut fields = line.split('\t');
        let (Some(idx), Some(stage), Some(conf), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(bad("expected three tab-separated fields"));
        };
        let epoch_index = idx.trim().parse().map_err(|_| bad("epoch index is not an integer"))?;
        let stage = stage.parse()?;
        let confidence: f64 = conf.trim().parse().map_err(|_| bad("confidence is not a number"))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(bad("confidence outside [0, 1]"));
        }
        if out.last().is_some_and(|r: &HypnogramRecord| r.epoch_index >= epoch_index) {
            return Err(bad("epoch indices must increase"));
        }
        out.push(HypnogramRecord { epoch_index, stage, confidence });
    }
    Ok(out)
}

pub fn import_hypnogram(path: &Path) -> Result<Vec<HypnogramRecord>, StagingError> {
    let text = std::fs::read_to_string(path).map_err(|source| StagingError::Io { path: path.display().to_string(), source })?;
    parse_hypnogram(&text)
}
