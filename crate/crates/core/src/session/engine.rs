//! The signal graph of one session, stepped on a single thread.
//!
//! Chunk arrivals drive graph time. Before each arrival the engine fires every
//! timer (stimulus deadlines, controller ticks) that falls at or before it, at
//! the timer's own time, so replay delivers stimuli exactly on schedule.

use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

use log::warn;

use super::{
    ConfigSnapshot, ControlCommand, EegDecimator, EffectorConfig, EventKind, EventLog, SessionConfig, SessionError,
    SessionEvent, SessionState, SourceConfig, StagerConfig, StatusReport, StopReason,
};
use crate::dsp::{EpochAccumulator, EpochFeatures, EPOCH_SECS};
use crate::msgbus::{Backpressure, BusError, Graph, ReplayDriver, Subscription, TopicHandle, TopicSpec};
use crate::signal_io::{
    read_edf, rematrix, DcmItem, DcmReader, Derivation, DeviceMeta, GapMarker, SignalChunk, SignalError,
    SimulatedDevice,
};
use crate::staging::{
    export_hypnogram, ExternalStager, HypnogramEpoch, HypnogramRecord, RuleBasedStager, SleepOnset, SleepStage,
    Stager, StagingPipeline,
};
use crate::subject_sim::SubjectSim;
use crate::swdetect::{write_stim_log, AudioBurst, DeliveryMode, SlowWaveDetector, StimEvent, StimScheduler, SwError};
use crate::thermal::{EffectorSink, LineSink, PlantSink, SetTemp, ThermalError, ThermalState, ThermalTask};
use crate::time::Timestamp;

pub const EVENTS_FILE: &str = "events.ndjson";
pub const HYPNOGRAM_FILE: &str = "hypnogram.tsv";
pub const STIMS_FILE: &str = "stims.tsv";
pub const EFFECTOR_FILE: &str = "effector.txt";
pub const CONFIG_FILE: &str = "config.json";

const DEVICE_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

pub mod topic_names {
    pub const EEG: &str = "eeg/raw";
    pub const EPOCHS: &str = "stage/epochs";
    pub const STIMS: &str = "stim/events";
    pub const AUDIO: &str = "audio/out";
    pub const THERMAL: &str = "thermal/state";
    pub const EVENTS: &str = "session/events";
    pub const COMMANDS: &str = "control/commands";
}

pub(crate) struct Topics {
    eeg: TopicHandle<SignalChunk>,
    epochs: TopicHandle<HypnogramEpoch>,
    pub(crate) stims: TopicHandle<StimEvent>,
    audio: TopicHandle<AudioBurst>,
    thermal: TopicHandle<ThermalState>,
    events: TopicHandle<SessionEvent>,
    pub(crate) commands: TopicHandle<ControlCommand>,
}

impl Topics {
    pub(crate) fn create(graph: &Graph) -> Result<Self, BusError> {
        use crate::msgbus::PayloadKind as K;
        use topic_names as n;
        let spec = |name: &str, kind, cap, bp| TopicSpec::new(name, kind, cap, bp);
        Ok(Topics {
            eeg: graph.create_topic(spec(n::EEG, K::SignalChunk, 64, Backpressure::DropOldest))?,
            epochs: graph.create_topic(spec(n::EPOCHS, K::HypnogramEpoch, 256, Backpressure::DropOldest))?,
            stims: graph.create_topic(spec(n::STIMS, K::StimEvent, 1024, Backpressure::DropOldest))?,
            audio: graph.create_topic(spec(n::AUDIO, K::AudioBurst, 16, Backpressure::DropOldest))?,
            thermal: graph.create_topic(spec(n::THERMAL, K::ThermalState, 1, Backpressure::LatestOnly))?,
            events: graph.create_topic(spec(n::EVENTS, K::SessionEvent, 1024, Backpressure::DropOldest))?,
            commands: graph.create_topic(spec(n::COMMANDS, K::ControlCommand, 64, Backpressure::Block))?,
        })
    }
}

/// Fan-out of logged events to listeners outside the graph (e.g. a push stream).
#[derive(Default)]
pub struct EventHub {
    listeners: Mutex<Vec<mpsc::Sender<SessionEvent>>>,
}

impl EventHub {
    pub fn subscribe(&self) -> mpsc::Receiver<SessionEvent> {
        let (tx, rx) = mpsc::channel();
        self.listeners.lock().unwrap().push(tx);
        rx
    }

    fn broadcast(&self, e: &SessionEvent) {
        self.listeners.lock().unwrap().retain(|tx| tx.send(e.clone()).is_ok());
    }
}

/// Status shared between the graph thread and observers.
#[derive(Default)]
pub(crate) struct Live {
    inner: Mutex<LiveInner>,
}

#[derive(Default)]
struct LiveInner {
    report: StatusReport,
    decimator: Option<EegDecimator>,
    labels: Vec<String>,
    effective: Option<ConfigSnapshot>,
    wall_start: Option<Instant>,
}

impl Live {
    fn update(&self, f: impl FnOnce(&mut StatusReport)) {
        f(&mut self.inner.lock().unwrap().report);
    }

    pub(crate) fn state(&self) -> SessionState {
        self.inner.lock().unwrap().report.state
    }

    pub(crate) fn snapshot(&self, graph: Option<&Graph>) -> StatusReport {
        let inner = self.inner.lock().unwrap();
        let mut r = inner.report.clone();
        if let Some(d) = &inner.decimator {
            r.eeg = d.snapshot(&inner.labels);
        }
        if let Some(g) = graph {
            r.graph_stats = g.stats();
        }
        if let Some(w) = inner.wall_start {
            r.wall_elapsed = w.elapsed().as_secs_f64();
        }
        r
    }

    pub(crate) fn effective(&self) -> Option<ConfigSnapshot> {
        self.inner.lock().unwrap().effective.clone()
    }

    pub(crate) fn set_effective(&self, snap: ConfigSnapshot) {
        self.inner.lock().unwrap().effective = Some(snap);
    }

    pub(crate) fn fail(&self, message: String) {
        self.update(|r| {
            r.state = SessionState::Failed;
            r.error = Some(message);
        });
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep a full-rate copy of this (rematrixed) channel in the summary.
    pub record_channel: Option<usize>,
}

/// Full-rate copy of one channel, zero-filled over gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub start: Timestamp,
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

/// Everything a finished session produced.
#[derive(Debug, Clone)]
pub struct SessionSummary {
    pub session_dir: PathBuf,
    pub status: StatusReport,
    pub stims: Vec<StimEvent>,
    pub hypnogram: Vec<HypnogramEpoch>,
    pub audio_lengths: Vec<usize>,
    pub recording: Option<Recording>,
    pub wall_secs: f64,
    pub graph_secs: f64,
}

impl SessionSummary {
    pub fn events_path(&self) -> PathBuf {
        self.session_dir.join(EVENTS_FILE)
    }
}

enum FileItem {
    Chunk(SignalChunk),
    Gap(GapMarker),
}

type FileItems = Box<dyn Iterator<Item = Result<FileItem, SignalError>> + Send>;

enum Source {
    Sim(SimulatedDevice<SubjectSim>),
    File { items: FileItems, last_delivery: Timestamp },
}

enum SourceItem {
    Chunk { chunk: SignalChunk, delivered_at: Timestamp },
    Gap(GapMarker),
    Failed(String),
}

impl Source {
    fn next(&mut self) -> Option<SourceItem> {
        match self {
            Source::Sim(dev) => dev.next().map(|d| SourceItem::Chunk { chunk: d.chunk, delivered_at: d.delivered_at }),
            Source::File { items, last_delivery } => match items.next()? {
                Ok(FileItem::Chunk(chunk)) => {
                    let delivered_at = chunk.end().max(*last_delivery);
                    *last_delivery = delivered_at;
                    Some(SourceItem::Chunk { chunk, delivered_at })
                }
                Ok(FileItem::Gap(g)) => Some(SourceItem::Gap(g)),
                Err(e) => Some(SourceItem::Failed(e.to_string())),
            },
        }
    }
}

struct TeeSink(Vec<Box<dyn EffectorSink>>);

impl EffectorSink for TeeSink {
    fn send(&mut self, cmd: &SetTemp) -> Result<(), ThermalError> {
        for s in &mut self.0 {
            s.send(cmd)?;
        }
        Ok(())
    }
}

fn open_source(cfg: &SessionConfig, stim_feed: Option<Subscription<StimEvent>>) -> Result<(DeviceMeta, Source), SessionError> {
    let bad = |e: &dyn std::fmt::Display| SessionError::BadConfig(e.to_string());
    match &cfg.source {
        SourceConfig::SimulatedSubject { plan, response, jitter, .. } => {
            let mut sim = SubjectSim::new(plan.resolve(), *response).map_err(|e| bad(&e))?;
            if let Some(feed) = stim_feed {
                sim = sim.with_stim_feed(feed);
            }
            let meta = SubjectSim::meta();
            let dev = SimulatedDevice::new(meta.clone(), sim, *jitter, cfg.seed ^ DEVICE_SEED_MIX);
            Ok((meta, Source::Sim(dev)))
        }
        SourceConfig::EdfReplay { path, .. } => {
            let (meta, chunks) = read_edf(path).map_err(|e| bad(&e))?;
            let items: FileItems = Box::new(chunks.map(|r| r.map(FileItem::Chunk)));
            Ok((meta, Source::File { items, last_delivery: Timestamp::ZERO }))
        }
        SourceConfig::DcmLogReplay { path, .. } => {
            let reader = DcmReader::open(path).map_err(|e| bad(&e))?;
            let meta = reader.meta().clone();
            let items: FileItems = Box::new(reader.filter_map(|r| match r {
                Ok(DcmItem::Chunk(c)) => Some(Ok(FileItem::Chunk(c))),
                Ok(DcmItem::Gap(g)) => Some(Ok(FileItem::Gap(g))),
                Ok(DcmItem::Aux { .. }) => None,
                Err(e) => Some(Err(e)),
            }));
            Ok((meta, Source::File { items, last_delivery: Timestamp::ZERO }))
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SessionError + '_ {
    move |e| SessionError::io(path, e)
}

pub(crate) struct Engine {
    cfg: SessionConfig,
    dir: PathBuf,
    meta: DeviceMeta,
    needs_rematrix: bool,
    source: Source,
    graph: Arc<Graph>,
    topics: Topics,
    commands: Subscription<ControlCommand>,
    detector: SlowWaveDetector,
    scheduler: StimScheduler,
    epochs: EpochAccumulator,
    staging: StagingPipeline,
    thermal: ThermalTask,
    log: EventLog,
    live: Arc<Live>,
    hub: Arc<EventHub>,
    opts: RunOptions,
    effective: ConfigSnapshot,
    next_frame: u64,
    thermal_ticks: u64,
    prev_stage: Option<SleepStage>,
    pending_gap_reason: Option<String>,
    stop: Option<StopReason>,
    stims: Vec<StimEvent>,
    hypnogram: Vec<HypnogramEpoch>,
    audio_lengths: Vec<usize>,
    recording: Option<Recording>,
}

impl Engine {
    /// Validates the configuration, opens every input and output, and wires the graph.
    pub(crate) fn build(
        cfg: SessionConfig,
        data_dir: &Path,
        graph: Arc<Graph>,
        topics: Topics,
        live: Arc<Live>,
        hub: Arc<EventHub>,
        opts: RunOptions,
    ) -> Result<Self, SessionError> {
        cfg.validate()?;
        let bad = |m: String| SessionError::BadConfig(m);
        let stim_feed = topics.stims.subscribe_with(Backpressure::DropOldest, 4096)?;
        let (mut meta, source) = open_source(&cfg, Some(stim_feed))?;
        if let Some(d) = cfg.derivation {
            meta.derivation = vec![d; meta.channel_count];
        }
        meta.validate().map_err(|e| bad(e.to_string()))?;
        let n = meta.channel_count;
        for (what, ch) in [
            ("astim.detect_channel", Some(cfg.astim.detect_channel)),
            ("staging_channel", Some(cfg.staging_channel)),
            ("record_channel", opts.record_channel),
        ] {
            if let Some(c) = ch.filter(|&c| c >= n) {
                return Err(bad(format!("{what} {c} but the recording has {n} channels")));
            }
        }
        let rate = meta.sample_rate;
        let detector = SlowWaveDetector::new(&cfg.astim, rate).map_err(|e| bad(e.to_string()))?;

        let dir = data_dir.join(&cfg.session_id);
        if dir.exists() {
            return Err(bad(format!("session_id {:?} already used in {}", cfg.session_id, data_dir.display())));
        }
        fs::create_dir_all(data_dir).map_err(io_err(data_dir))?;
        fs::create_dir(&dir).map_err(io_err(&dir))?;

        let effector_path = dir.join(EFFECTOR_FILE);
        let mut sinks: Vec<Box<dyn EffectorSink>> =
            vec![Box::new(LineSink::new(File::create(&effector_path).map_err(io_err(&effector_path))?))];
        match &cfg.effector {
            EffectorConfig::SimulatedPlant => {
                sinks.push(Box::new(PlantSink::new(cfg.thermal.neutral_setpoint, cfg.thermal.plant_tau, Timestamp::ZERO)))
            }
            EffectorConfig::Line { path } => {
                let out = OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(path)
                    .map_err(|e| bad(format!("cannot open effector {}: {e}", path.display())))?;
                sinks.push(Box::new(LineSink::new(out)));
            }
        }
        let thermal = ThermalTask::new(cfg.thermal, Timestamp::ZERO, Box::new(TeeSink(sinks)))
            .map_err(|e| bad(e.to_string()))?;
        let stager: Box<dyn Stager> = match &cfg.stager {
            StagerConfig::RuleBased { thresholds } => Box::new(RuleBasedStager::new(*thresholds)),
            StagerConfig::External { endpoint } => Box::new(ExternalStager::new(endpoint.clone())),
        };
        let config_path = dir.join(CONFIG_FILE);
        let config_json = serde_json::to_string_pretty(&cfg).expect("config serializes");
        fs::write(&config_path, config_json).map_err(io_err(&config_path))?;
        let log = EventLog::create(&dir.join(EVENTS_FILE))?;

        let effective = ConfigSnapshot { astim: cfg.astim.clone(), thermal: cfg.thermal };
        {
            let mut inner = live.inner.lock().unwrap();
            inner.report = StatusReport {
                state: SessionState::Starting,
                session_id: Some(cfg.session_id.clone()),
                astim_mode: Some(cfg.astim.mode),
                thermal: Some(thermal.state()),
                thermal_config: Some(cfg.thermal),
                ..StatusReport::default()
            };
            inner.decimator = Some(EegDecimator::new(rate, n));
            inner.labels = meta.channel_labels.clone();
            inner.effective = Some(effective.clone());
            inner.wall_start = Some(Instant::now());
        }
        let commands = topics.commands.subscribe_with(Backpressure::Block, 64)?;
        let recording = opts.record_channel.map(|_| Recording { start: Timestamp::ZERO, sample_rate: rate, samples: Vec::new() });
        Ok(Engine {
            needs_rematrix: meta.derivation.iter().any(|d| *d != Derivation::Raw),
            scheduler: StimScheduler::new(cfg.astim.clone(), cfg.seed),
            epochs: EpochAccumulator::new(rate, EPOCH_SECS, Timestamp::ZERO),
            staging: StagingPipeline::new(stager, Timestamp::ZERO),
            cfg,
            dir,
            meta,
            source,
            graph,
            topics,
            commands,
            detector,
            thermal,
            log,
            live,
            hub,
            opts,
            effective,
            next_frame: 0,
            thermal_ticks: 0,
            prev_stage: None,
            pending_gap_reason: None,
            stop: None,
            stims: Vec::new(),
            hypnogram: Vec::new(),
            audio_lengths: Vec::new(),
            recording,
        })
    }

    pub(crate) fn run(mut self) -> Result<SessionSummary, SessionError> {
        let wall = Instant::now();
        let mut driver = self.graph.replay_driver("session", self.cfg.source.speed())?;
        self.graph.set_running(true);
        self.log_event(
            Timestamp::ZERO,
            EventKind::SessionStart {
                session_id: self.cfg.session_id.clone(),
                config: Box::new(self.cfg.clone()),
                channel_count: self.meta.channel_count,
                sample_rate: self.meta.sample_rate,
            },
        )?;
        self.live.update(|r| r.state = SessionState::Running);

        let reason = loop {
            if let Some(r) = self.stop {
                break r;
            }
            match self.source.next() {
                None => break StopReason::EndOfRecording,
                Some(SourceItem::Failed(msg)) => {
                    let now = driver.now();
                    self.log_error(now, format!("source: {msg}"))?;
                    break StopReason::SourceError;
                }
                Some(SourceItem::Gap(g)) => self.pending_gap_reason = Some(g.reason),
                Some(SourceItem::Chunk { chunk, delivered_at }) => {
                    self.advance_timers(&mut driver, delivered_at)?;
                    let now = delivered_at.max(driver.now());
                    driver.tick(now);
                    self.drain_commands(now)?;
                    if self.stop.is_none() {
                        self.process_chunk(chunk, now)?;
                    }
                    self.live.update(|r| r.graph_time = now);
                }
            }
        };

        let end = driver.now();
        let epochs_scored = self.hypnogram.len() as u64;
        self.stop = Some(reason);
        self.log_event(end, EventKind::SessionStop { reason, epochs_scored })?;
        let hyp_path = self.dir.join(HYPNOGRAM_FILE);
        let records: Vec<HypnogramRecord> = self.hypnogram.iter().map(HypnogramRecord::from).collect();
        export_hypnogram(&hyp_path, &records).map_err(|e| SessionError::Engine(e.to_string()))?;
        let stims_path = self.dir.join(STIMS_FILE);
        let out = BufWriter::new(File::create(&stims_path).map_err(io_err(&stims_path))?);
        write_stim_log(out, &self.stims).map_err(io_err(&stims_path))?;
        self.topics.events.close();
        self.live.update(|r| {
            r.state = SessionState::Stopped;
            r.stop_reason = Some(reason);
            r.graph_time = end;
        });
        drop(driver);
        self.graph.set_running(false);
        let status = self.live.snapshot(Some(&self.graph));
        Ok(SessionSummary {
            session_dir: self.dir,
            status,
            stims: self.stims,
            hypnogram: self.hypnogram,
            audio_lengths: self.audio_lengths,
            recording: self.recording,
            wall_secs: wall.elapsed().as_secs_f64(),
            graph_secs: end.as_secs_f64(),
        })
    }

    fn thermal_due(&self) -> Timestamp {
        Timestamp::ZERO.offset_secs(self.thermal_ticks as f64 * self.cfg.thermal.tick)
    }

    /// Fires stimulus and controller timers due at or before `until`, each at its own time.
    fn advance_timers(&mut self, driver: &mut ReplayDriver, until: Timestamp) -> Result<(), SessionError> {
        loop {
            let thermal_due = self.thermal_due();
            let stim_due = self.scheduler.next_due().unwrap_or(Timestamp::MAX);
            let next = stim_due.min(thermal_due);
            if next > until {
                return Ok(());
            }
            let at = next.max(driver.now());
            driver.tick(at);
            if stim_due <= thermal_due {
                self.fire_stims(at)?;
            } else {
                self.thermal_ticks += 1;
                self.thermal_step(at, None, None)?;
            }
        }
    }

    fn fire_stims(&mut self, at: Timestamp) -> Result<(), SessionError> {
        for fired in self.scheduler.poll(at) {
            let event = fired.event;
            if let Some(SwError::MissedDeadline { late_ms, .. }) = fired.missed {
                self.log_event(at, EventKind::StimMissed { event: event.clone(), late_ms })?;
                self.live.update(|r| {
                    r.stim_missed += 1;
                    r.push_stim(&event);
                });
            } else {
                self.log_event(at, EventKind::StimDelivered { event: event.clone() })?;
                self.live.update(|r| {
                    r.stim_delivered += 1;
                    match event.mode_at_delivery {
                        DeliveryMode::Active => r.stim_delivered_active += 1,
                        DeliveryMode::Sham => r.stim_delivered_sham += 1,
                    }
                    r.push_stim(&event);
                });
            }
            if let Err(e) = self.topics.stims.publish(at, event.clone()) {
                warn!("stim/events: {e}");
            }
            if let Some(audio) = fired.audio {
                self.audio_lengths.push(audio.samples.len());
                if let Err(e) = self.topics.audio.publish(at, audio) {
                    warn!("audio/out: {e}");
                }
            }
            self.stims.push(event);
        }
        Ok(())
    }

    fn thermal_step(
        &mut self,
        now: Timestamp,
        epoch: Option<&HypnogramEpoch>,
        onset: Option<&SleepOnset>,
    ) -> Result<(), SessionError> {
        match self.thermal.tick(now, epoch, onset) {
            Ok((state, changes)) => {
                for c in changes {
                    self.log_event(
                        now,
                        EventKind::ThermalPhaseChange { from: c.from, to: c.to, setpoint: state.commanded_setpoint },
                    )?;
                }
                if let Err(e) = self.topics.thermal.publish(now, state) {
                    warn!("thermal/state: {e}");
                }
                self.live.update(|r| r.thermal = Some(state));
                Ok(())
            }
            Err(e) => self.log_error(now, format!("thermal effector: {e}")),
        }
    }

    fn drain_commands(&mut self, now: Timestamp) -> Result<(), SessionError> {
        for env in self.commands.drain() {
            self.handle_command(&env.payload, now)?;
        }
        Ok(())
    }

    fn handle_command(&mut self, cmd: &ControlCommand, now: Timestamp) -> Result<(), SessionError> {
        match cmd {
            ControlCommand::StopSession => {
                self.stop.get_or_insert(StopReason::Operator);
            }
            ControlCommand::MarkNote { text } => {
                self.log_event(now, EventKind::OperatorNote { text: text.clone() })?;
                self.live.update(|r| r.notes += 1);
            }
            _ => match cmd.apply_to(&self.effective) {
                Ok(Some(after)) => {
                    let command = serde_json::to_string(cmd).expect("commands serialize");
                    let before = self.effective.clone();
                    self.log_event(now, EventKind::ConfigChange { command, before, after: after.clone() })?;
                    self.scheduler.set_mode(after.astim.mode);
                    if let Err(e) = self.thermal.set_config(after.thermal) {
                        return self.log_error(now, format!("set_thermal: {e}"));
                    }
                    self.live.update(|r| {
                        r.config_changes += 1;
                        r.astim_mode = Some(after.astim.mode);
                        r.thermal_config = Some(after.thermal);
                    });
                    self.effective = after;
                }
                Ok(None) => {}
                Err(e) => self.log_error(now, format!("{}: {e}", cmd.name()))?,
            },
        }
        Ok(())
    }

    fn process_chunk(&mut self, chunk: SignalChunk, now: Timestamp) -> Result<(), SessionError> {
        let rate = self.meta.sample_rate;
        if (chunk.sample_rate - rate).abs() > 1e-9 || chunk.channels() != self.meta.channel_count {
            return self.log_error(
                now,
                format!("chunk {} has {} channels at {} Hz, expected {} at {rate} Hz", chunk.seq, chunk.channels(), chunk.sample_rate, self.meta.channel_count),
            );
        }
        let first = (chunk.start.as_secs_f64() * rate).round() as u64;
        if first < self.next_frame {
            return self.log_error(now, format!("chunk {} overlaps earlier data by {} frames", chunk.seq, self.next_frame - first));
        }
        if first > self.next_frame {
            let missing = first - self.next_frame;
            let reason = self.pending_gap_reason.take().unwrap_or_else(|| "discontinuity".into());
            self.log_event(now, EventKind::Gap { missing_frames: missing, reason })?;
            self.live.update(|r| {
                r.gaps += 1;
                r.missing_frames += missing;
            });
            if let Some(rec) = &mut self.recording {
                rec.samples.resize(rec.samples.len() + missing as usize, 0.0);
            }
            for f in self.epochs.push_gap(missing) {
                self.on_epoch(f, now)?;
            }
            self.next_frame = first;
        }
        let chunk = if self.needs_rematrix {
            match rematrix(&chunk, &self.meta) {
                Ok(c) => c,
                Err(e) => return self.log_error(now, format!("rematrix: {e}")),
            }
        } else {
            chunk
        };
        if let (Some(rec), Some(c)) = (&mut self.recording, self.opts.record_channel) {
            rec.samples.extend_from_slice(chunk.channel(c));
        }
        let detect = self.cfg.astim.detect_channel;
        let staging = self.cfg.staging_channel;
        for f in 0..chunk.frames() {
            let stage = self.staging.current_stage().unwrap_or(SleepStage::W);
            let (_, crossing) = self.detector.push(chunk.frame_time(f), chunk.sample(detect, f), stage);
            if let Some(c) = crossing {
                self.scheduler.schedule(c, stage);
            }
            if let Some(features) = self.epochs.push_sample(chunk.sample(staging, f)) {
                self.on_epoch(features, now)?;
            }
        }
        self.next_frame += chunk.frames() as u64;
        // Anything that became due while the chunk was in flight goes out now, late.
        self.fire_stims(now)?;
        {
            let mut inner = self.live.inner.lock().unwrap();
            if let Some(d) = &mut inner.decimator {
                d.push_chunk(&chunk);
            }
        }
        if let Err(e) = self.topics.eeg.publish(now, chunk) {
            warn!("eeg/raw: {e}");
        }
        Ok(())
    }

    fn on_epoch(&mut self, features: EpochFeatures, now: Timestamp) -> Result<(), SessionError> {
        let (epoch, onset) = self.staging.push(features);
        let to = epoch.stage_smoothed;
        if self.prev_stage != Some(to) {
            self.log_event(
                now,
                EventKind::StageChange { epoch_index: epoch.epoch_index, from: self.prev_stage, to, confidence: epoch.confidence },
            )?;
            self.live.update(|r| r.stage_changes += 1);
        }
        self.prev_stage = Some(to);
        if let Some(o) = onset {
            self.log_event(now, EventKind::SleepOnset { onset_epoch: o.onset_epoch, onset_time: o.onset_time })?;
            self.live.update(|r| r.onset_epoch = Some(o.onset_epoch));
        }
        self.live.update(|r| {
            r.epochs_scored = epoch.epoch_index + 1;
            r.current_stage = Some(to);
            r.hypnogram.push(HypnogramRecord::from(&epoch));
        });
        if let Err(e) = self.topics.epochs.publish(now, epoch.clone()) {
            warn!("stage/epochs: {e}");
        }
        self.thermal_step(now, Some(&epoch), onset.as_ref())?;
        self.hypnogram.push(epoch);
        Ok(())
    }

    fn log_error(&mut self, at: Timestamp, message: String) -> Result<(), SessionError> {
        warn!("session {}: {message}", self.cfg.session_id);
        self.log_event(at, EventKind::Error { message })?;
        self.live.update(|r| r.errors += 1);
        Ok(())
    }

    fn log_event(&mut self, at: Timestamp, kind: EventKind) -> Result<(), SessionError> {
        let e = self.log.append(at, kind)?;
        self.live.update(|r| r.events_logged += 1);
        if let Err(err) = self.topics.events.publish(e.at, e.clone()) {
            warn!("session/events: {err}");
        }
        self.hub.broadcast(&e);
        Ok(())
    }
}
