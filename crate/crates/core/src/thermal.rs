//! Bedding-temperature controller and first-order pad model.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::msgbus::{BusPayload, PayloadKind};
use crate::staging::{HypnogramEpoch, SleepOnset};
use crate::time::Timestamp;

#[derive(Debug, Error)]
pub enum ThermalError {
    #[error("invalid thermal config: {0}")]
    InvalidConfig(String),
    #[error("malformed effector record {0:?}")]
    BadRecord(String),
    #[error("effector sink: {0}")]
    Sink(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThermalMode {
    /// Cool at a fixed delay (seconds) after session start.
    FixedDelay { delay: f64 },
    /// Cool at decoded sleep onset; revert on sustained wake.
    StageYoked,
}

impl Default for ThermalMode {
    fn default() -> Self {
        ThermalMode::FixedDelay { delay: 1200.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermalConfig {
    pub mode: ThermalMode,
    pub neutral_setpoint: f64,
    pub cool_setpoint: f64,
    pub ramp_duration: f64,
    pub wake_revert_after: f64,
    pub plant_tau: f64,
    /// Controller period in seconds of graph time.
    pub tick: f64,
}

impl Default for ThermalConfig {
    fn default() -> Self {
        ThermalConfig {
            mode: ThermalMode::default(),
            neutral_setpoint: 27.0,
            cool_setpoint: 20.0,
            ramp_duration: 600.0,
            wake_revert_after: 300.0,
            plant_tau: 300.0,
            tick: 1.0,
        }
    }
}

impl ThermalConfig {
    pub fn validate(&self) -> Result<(), ThermalError> {
        let bad = |m: String| Err(ThermalError::InvalidConfig(m));
        if !(self.cool_setpoint < self.neutral_setpoint) {
            return bad(format!(
                "cool setpoint {} must be below neutral setpoint {}",
                self.cool_setpoint, self.neutral_setpoint
            ));
        }
        if !(self.ramp_duration > 0.0) {
            return bad(format!("ramp_duration {} must be positive", self.ramp_duration));
        }
        if !(self.plant_tau > 0.0) {
            return bad(format!("plant_tau {} must be positive", self.plant_tau));
        }
        if !(self.tick > 0.0 && self.tick <= 1.0) {
            return bad(format!("tick {} must lie in (0, 1] s", self.tick));
        }
        if !(self.wake_revert_after >= 0.0) {
            return bad(format!("wake_revert_after {} must be non-negative", self.wake_revert_after));
        }
        if let ThermalMode::FixedDelay { delay } = self.mode {
            if !(delay >= 0.0) {
                return bad(format!("fixed delay {delay} must be non-negative"));
            }
        }
        Ok(())
    }

    /// Setpoint change per second while ramping either way.
    pub fn slope(&self) -> f64 {
        (self.neutral_setpoint - self.cool_setpoint) / self.ramp_duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThermalPhase {
    Neutral,
    Ramping,
    Cool,
    Reverting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    pub phase: ThermalPhase,
    pub commanded_setpoint: f64,
    pub pad_temp_model: f64,
    pub since: Timestamp,
}

impl BusPayload for ThermalState {
    const KIND: PayloadKind = PayloadKind::ThermalState;
}

/// Exact step of `dT/dt = (command - T) / tau`.
pub fn plant_step(pad_temp: f64, command: f64, dt: f64, tau: f64) -> f64 {
    command + (pad_temp - command) * (-dt / tau).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalPlant {
    pub temp: f64,
    pub tau: f64,
}

impl ThermalPlant {
    pub fn new(temp: f64, tau: f64) -> Self {
        ThermalPlant { temp, tau }
    }

    pub fn step(&mut self, command: f64, dt: f64) -> f64 {
        if dt > 0.0 {
            self.temp = plant_step(self.temp, command, dt, self.tau);
        }
        self.temp
    }
}

/// A phase transition made by one controller step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseChange {
    pub from: ThermalPhase,
    pub to: ThermalPhase,
    pub at: Timestamp,
}

/// Onset/wake state machine producing the commanded setpoint.
#[derive(Debug, Clone)]
pub struct ThermalController {
    cfg: ThermalConfig,
    session_start: Timestamp,
    phase: ThermalPhase,
    since: Timestamp,
    setpoint: f64,
    /// Setpoint when the current phase began.
    phase_origin: f64,
    fixed_fired: bool,
    onset_seen: bool,
    /// First and last end of the current run of smoothed W epochs.
    wake_run: Option<(Timestamp, Timestamp)>,
    /// Start of the current non-W run seen since the last revert began.
    sleep_run: Option<(u64, u32)>,
    rearm_pending: bool,
}

impl ThermalController {
    pub fn new(cfg: ThermalConfig, session_start: Timestamp) -> Result<Self, ThermalError> {
        cfg.validate()?;
        Ok(ThermalController {
            cfg,
            session_start,
            phase: ThermalPhase::Neutral,
            since: session_start,
            setpoint: cfg.neutral_setpoint,
            phase_origin: cfg.neutral_setpoint,
            fixed_fired: false,
            onset_seen: false,
            wake_run: None,
            sleep_run: None,
            rearm_pending: false,
        })
    }

    pub fn config(&self) -> &ThermalConfig {
        &self.cfg
    }

    pub fn phase(&self) -> ThermalPhase {
        self.phase
    }

    pub fn since(&self) -> Timestamp {
        self.since
    }

    pub fn setpoint(&self) -> f64 {
        self.setpoint
    }

    /// Replaces the configuration; the new values apply from the next step.
    pub fn set_config(&mut self, cfg: ThermalConfig) -> Result<(), ThermalError> {
        cfg.validate()?;
        self.cfg = cfg;
        self.setpoint = self.setpoint.clamp(cfg.cool_setpoint, cfg.neutral_setpoint);
        Ok(())
    }

    fn enter(&mut self, phase: ThermalPhase, now: Timestamp, changes: &mut Vec<PhaseChange>) {
        changes.push(PhaseChange { from: self.phase, to: phase, at: now });
        self.phase = phase;
        self.since = now;
        self.phase_origin = self.setpoint;
    }

    fn observe_epoch(&mut self, e: &HypnogramEpoch) {
        let end = e.epoch_end();
        if e.stage_smoothed.is_wake() {
            let start = self.wake_run.map_or(e.epoch_start, |(s, _)| s);
            self.wake_run = Some((start, end));
            self.sleep_run = None;
        } else {
            self.wake_run = None;
            let run = match self.sleep_run {
                Some((first, n)) if first + n as u64 == e.epoch_index => (first, n + 1),
                _ => (e.epoch_index, 1),
            };
            self.sleep_run = Some(run);
            if run.1 >= 2 && matches!(self.phase, ThermalPhase::Reverting | ThermalPhase::Neutral) && self.onset_seen {
                self.rearm_pending = true;
            }
        }
    }

    fn wake_secs(&self) -> f64 {
        self.wake_run.map_or(0.0, |(s, e)| e.secs_since(s))
    }

    /// Advances to `now`, folding in a new epoch and/or onset if one arrived.
    pub fn step(
        &mut self,
        now: Timestamp,
        epoch: Option<&HypnogramEpoch>,
        onset: Option<&SleepOnset>,
    ) -> (f64, Vec<PhaseChange>) {
        let cfg = self.cfg;
        let mut changes = Vec::new();
        if let Some(e) = epoch {
            self.observe_epoch(e);
        }
        match cfg.mode {
            ThermalMode::FixedDelay { delay } => {
                let due = self.session_start.offset_secs(delay);
                if !self.fixed_fired && self.phase == ThermalPhase::Neutral && now >= due {
                    self.fixed_fired = true;
                    self.enter(ThermalPhase::Ramping, now, &mut changes);
                }
            }
            ThermalMode::StageYoked => {
                let first_onset = onset.is_some() && !self.onset_seen;
                if first_onset {
                    self.onset_seen = true;
                }
                if self.phase == ThermalPhase::Neutral && (first_onset || self.rearm_pending) {
                    self.rearm_pending = false;
                    self.enter(ThermalPhase::Ramping, now, &mut changes);
                } else if matches!(self.phase, ThermalPhase::Ramping | ThermalPhase::Cool)
                    && self.wake_secs() >= cfg.wake_revert_after
                    && self.wake_run.is_some()
                {
                    self.sleep_run = None;
                    self.rearm_pending = false;
                    self.enter(ThermalPhase::Reverting, now, &mut changes);
                }
            }
        }
        let elapsed = now.secs_since(self.since).max(0.0);
        match self.phase {
            ThermalPhase::Neutral => self.setpoint = cfg.neutral_setpoint,
            ThermalPhase::Ramping => {
                self.setpoint = (self.phase_origin - cfg.slope() * elapsed).max(cfg.cool_setpoint);
                if elapsed >= cfg.ramp_duration || self.setpoint <= cfg.cool_setpoint {
                    self.setpoint = cfg.cool_setpoint;
                    self.enter(ThermalPhase::Cool, now, &mut changes);
                }
            }
            ThermalPhase::Cool => self.setpoint = cfg.cool_setpoint,
            ThermalPhase::Reverting => {
                self.setpoint = (self.phase_origin + cfg.slope() * elapsed).min(cfg.neutral_setpoint);
                if self.setpoint >= cfg.neutral_setpoint {
                    self.enter(ThermalPhase::Neutral, now, &mut changes);
                    if self.rearm_pending {
                        self.rearm_pending = false;
                        self.enter(ThermalPhase::Ramping, now, &mut changes);
                    }
                }
            }
        }
        self.setpoint = self.setpoint.clamp(cfg.cool_setpoint, cfg.neutral_setpoint);
        (self.setpoint, changes)
    }
}

/// Effector wire record `set_temp <celsius>` at 0.1 degree resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetTemp {
    pub at: Timestamp,
    /// Tenths of a degree Celsius.
    pub decicelsius: i32,
}

impl SetTemp {
    pub fn new(at: Timestamp, celsius: f64) -> Self {
        SetTemp { at, decicelsius: (celsius * 10.0).round() as i32 }
    }

    pub fn celsius(&self) -> f64 {
        self.decicelsius as f64 / 10.0
    }
}

impl fmt::Display for SetTemp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "set_temp {:.1}", self.celsius())
    }
}

impl FromStr for SetTemp {
    type Err = ThermalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ThermalError::BadRecord(s.to_string());
        let value = s.trim().strip_prefix("set_temp ").ok_or_else(bad)?;
        let c: f64 = value.trim().parse().map_err(|_| bad())?;
        if !c.is_finite() {
            return Err(bad());
        }
        Ok(SetTemp::new(Timestamp::ZERO, c))
    }
}

/// Destination for effector commands.
pub trait EffectorSink: Send {
    fn send(&mut self, cmd: &SetTemp) -> Result<(), ThermalError>;
}

/// Writes one text record per line to any byte stream (file, serial port, socket).
pub struct LineSink<W: Write + Send> {
    out: W,
}

impl<W: Write + Send> LineSink<W> {
    pub fn new(out: W) -> Self {
        LineSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> EffectorSink for LineSink<W> {
    fn send(&mut self, cmd: &SetTemp) -> Result<(), ThermalError> {
        writeln!(self.out, "{cmd}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Stand-in pad: the received setpoint drives a [`ThermalPlant`].
#[derive(Debug, Clone)]
pub struct PlantSink {
    pub plant: ThermalPlant,
    command: f64,
    last: Timestamp,
    pub received: Vec<SetTemp>,
}

impl PlantSink {
    pub fn new(initial: f64, tau: f64, start: Timestamp) -> Self {
        PlantSink { plant: ThermalPlant::new(initial, tau), command: initial, last: start, received: Vec::new() }
    }

    pub fn advance_to(&mut self, t: Timestamp) -> f64 {
        let dt = t.secs_since(self.last);
        if dt > 0.0 {
            self.plant.step(self.command, dt);
            self.last = t;
        }
        self.plant.temp
    }
}

impl EffectorSink for PlantSink {
    fn send(&mut self, cmd: &SetTemp) -> Result<(), ThermalError> {
        self.advance_to(cmd.at);
        self.command = cmd.celsius();
        self.received.push(*cmd);
        Ok(())
    }
}

/// Controller, pad model and effector sink run as one periodic task.
pub struct ThermalTask {
    controller: ThermalController,
    model: ThermalPlant,
    sink: Box<dyn EffectorSink>,
    last_tick: Timestamp,
    last_sent: Option<i32>,
    command: f64,
}

impl ThermalTask {
    pub fn new(cfg: ThermalConfig, session_start: Timestamp, sink: Box<dyn EffectorSink>) -> Result<Self, ThermalError> {
        let controller = ThermalController::new(cfg, session_start)?;
        Ok(ThermalTask {
            model: ThermalPlant::new(cfg.neutral_setpoint, cfg.plant_tau),
            controller,
            sink,
            last_tick: session_start,
            last_sent: None,
            command: cfg.neutral_setpoint,
        })
    }

    pub fn controller(&self) -> &ThermalController {
        &self.controller
    }

    pub fn set_config(&mut self, cfg: ThermalConfig) -> Result<(), ThermalError> {
        self.controller.set_config(cfg)?;
        self.model.tau = cfg.plant_tau;
        Ok(())
    }

    pub fn state(&self) -> ThermalState {
        ThermalState {
            phase: self.controller.phase(),
            commanded_setpoint: self.controller.setpoint(),
            pad_temp_model: self.model.temp,
            since: self.controller.since(),
        }
    }

    pub fn tick(
        &mut self,
        now: Timestamp,
        epoch: Option<&HypnogramEpoch>,
        onset: Option<&SleepOnset>,
    ) -> Result<(ThermalState, Vec<PhaseChange>), ThermalError> {
        let dt = now.secs_since(self.last_tick);
        self.model.step(self.command, dt);
        self.last_tick = self.last_tick.max(now);
        let (setpoint, changes) = self.controller.step(now, epoch, onset);
        let cmd = SetTemp::new(now, setpoint);
        if self.last_sent != Some(cmd.decicelsius) {
            self.sink.send(&cmd)?;
            self.last_sent = Some(cmd.decicelsius);
        }
        self.command = setpoint;
        Ok((self.state(), changes))
    }
}
