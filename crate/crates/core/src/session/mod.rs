//! Session lifecycle, operator commands, audit log and status.

mod command;
mod config;
mod engine;
mod events;
mod status;

use std::path::{Path, PathBuf};
use std::sync::mpsc::Receiver;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgbus::{BusError, Graph, TopicHandle};

pub use command::{ControlCommand, MAX_NOTE_LEN};
pub use config::{EffectorConfig, PlanSpec, SessionConfig, SourceConfig, StagerConfig};
pub use engine::{
    topic_names, EventHub, Recording, RunOptions, SessionSummary, CONFIG_FILE, EFFECTOR_FILE, EVENTS_FILE,
    HYPNOGRAM_FILE, STIMS_FILE,
};
pub use events::{
    decode_record, encode_record, parse_event_log, read_event_log, reconstruct, ConfigSnapshot, EventKind, EventLog,
    LogContents, RecordFault, SessionCounters, SessionEvent, StopReason,
};
pub use status::{EegBuffer, EegDecimator, SessionState, StatusReport, DISPLAY_WINDOW_SECS, MAX_DISPLAY_RATE};

use engine::{Engine, Live, Topics};

/// Environment variable naming the directory that holds one folder per session.
pub const DATA_DIR_ENV: &str = "SLEEPLOOP_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "sleeploop-data";
const START_WAIT: Duration = Duration::from_secs(1);

/// `$SLEEPLOOP_DATA_DIR`, or `./sleeploop-data` when unset.
pub fn data_dir_from_env() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from)
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("a session is already running")]
    AlreadyRunning,
    #[error("no session is running")]
    NotRunning,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("engine: {0}")]
    Engine(String),
}

impl SessionError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SessionError::Io { path: path.to_path_buf(), source }
    }
}

/// Runs a whole session on the calling thread and returns what it produced.
pub fn run_headless(cfg: SessionConfig, data_dir: &Path, opts: RunOptions) -> Result<SessionSummary, SessionError> {
    let graph = Arc::new(Graph::replay());
    let topics = Topics::create(&graph)?;
    let live = Arc::new(Live::default());
    let engine = Engine::build(cfg, data_dir, graph, topics, Arc::clone(&live), Arc::new(EventHub::default()), opts)?;
    engine.run().inspect_err(|e| live.fail(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandAck {
    pub cmd: String,
    /// Effector settings once the command takes effect.
    pub effective: ConfigSnapshot,
}

struct Active {
    graph: Arc<Graph>,
    live: Arc<Live>,
    commands: TopicHandle<ControlCommand>,
    thread: Option<JoinHandle<Result<SessionSummary, SessionError>>>,
    summary: Option<Result<SessionSummary, String>>,
}

impl Active {
    fn is_live(&self) -> bool {
        matches!(self.live.state(), SessionState::Starting | SessionState::Running)
    }

    fn join(&mut self) {
        if let Some(t) = self.thread.take() {
            let r = match t.join() {
                Ok(r) => r.map_err(|e| e.to_string()),
                Err(_) => Err("session thread panicked".to_string()),
            };
            if let Err(e) = &r {
                if self.is_live() {
                    self.live.fail(e.clone());
                }
            }
            self.summary = Some(r);
        }
    }
}

/// Owns at most one session at a time and serializes operator commands into it.
pub struct SessionManager {
    data_dir: PathBuf,
    hub: Arc<engine::EventHub>,
    active: Mutex<Option<Active>>,
}

impl SessionManager {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        SessionManager { data_dir: data_dir.into(), hub: Arc::default(), active: Mutex::new(None) }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Validates `cfg`, builds the graph and starts it on its own thread.
    ///
    /// Returns once the session reports Running (or has already finished), waiting at most one second.
    pub fn start(&self, cfg: SessionConfig) -> Result<StatusReport, SessionError> {
        let mut slot = self.active.lock().unwrap();
        if let Some(a) = slot.as_mut() {
            if a.is_live() {
                return Err(SessionError::AlreadyRunning);
            }
            a.join();
        }
        let graph = Arc::new(Graph::replay());
        let topics = Topics::create(&graph)?;
        let commands = topics.commands.clone();
        let live = Arc::new(Live::default());
        let engine = Engine::build(
            cfg,
            &self.data_dir,
            Arc::clone(&graph),
            topics,
            Arc::clone(&live),
            Arc::clone(&self.hub),
            RunOptions::default(),
        )?;
        let thread_live = Arc::clone(&live);
        let thread = std::thread::Builder::new()
            .name("session-graph".into())
            .spawn(move || engine.run().inspect_err(|e| thread_live.fail(e.to_string())))
            .map_err(|e| SessionError::Engine(format!("cannot spawn session thread: {e}")))?;
        let deadline = Instant::now() + START_WAIT;
        while live.state() == SessionState::Starting && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(1));
        }
        let report = live.snapshot(Some(&graph));
        *slot = Some(Active { graph, live, commands, thread: Some(thread), summary: None });
        Ok(report)
    }

    /// Validates `cmd` against the current settings and queues it for the graph.
    pub fn command(&self, cmd: ControlCommand) -> Result<CommandAck, SessionError> {
        let slot = self.active.lock().unwrap();
        let a = slot.as_ref().filter(|a| a.is_live()).ok_or(SessionError::NotRunning)?;
        let before = a.live.effective().ok_or(SessionError::NotRunning)?;
        let effective = cmd.apply_to(&before)?.unwrap_or(before);
        a.live.set_effective(effective.clone());
        let name = cmd.name().to_string();
        a.commands.publish(a.graph.now(), cmd)?;
        Ok(CommandAck { cmd: name, effective })
    }

    /// Stops the running session and waits for its files to be written.
    pub fn stop(&self) -> Result<StatusReport, SessionError> {
        let mut slot = self.active.lock().unwrap();
        let a = slot.as_mut().ok_or(SessionError::NotRunning)?;
        if a.is_live() {
            a.commands.publish(a.graph.now(), ControlCommand::StopSession)?;
        } else if a.thread.is_none() {
            return Err(SessionError::NotRunning);
        }
        a.join();
        Ok(a.live.snapshot(Some(&a.graph)))
    }

    /// Blocks until the current session ends on its own.
    pub fn wait(&self) -> Result<SessionSummary, SessionError> {
        let mut slot = self.active.lock().unwrap();
        let a = slot.as_mut().ok_or(SessionError::NotRunning)?;
        a.join();
        match a.summary.as_ref().expect("joined above") {
            Ok(s) => Ok(s.clone()),
            Err(e) => Err(SessionError::Engine(e.clone())),
        }
    }

    pub fn snapshot(&self) -> StatusReport {
        match self.active.lock().unwrap().as_ref() {
            Some(a) => a.live.snapshot(Some(&a.graph)),
            None => StatusReport::default(),
        }
    }

    /// Receives every event logged by this and later sessions.
    pub fn subscribe_events(&self) -> Receiver<SessionEvent> {
        self.hub.subscribe()
    }
}

impl Drop for SessionManager {
    fn drop(&mut self) {
        if let Some(a) = self.active.get_mut().unwrap().as_mut() {
            if a.is_live() {
                let _ = a.commands.publish(a.graph.now(), ControlCommand::StopSession);
            }
            a.join();
        }
    }
}
