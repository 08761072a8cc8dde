//! Python bindings: headless runs, live sessions, and a few signal helpers.
//!
//! Structured results cross the boundary as plain dicts and lists, decoded
//! from the same JSON the HTTP API serves.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use sleeploop::dsp::{band_power as welch_band_power, Band};
use sleeploop::session::{self, ControlCommand, RunOptions, SessionConfig, SessionError, SessionManager};
use sleeploop::staging::{smooth_hypnogram as smooth, HypnogramRecord, SleepStage};
use sleeploop::subject_sim::{channel_samples, synth_stage_eeg as synth};
use sleeploop::swdetect::gen_pink_noise;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn session_error(e: SessionError) -> PyErr {
    match e {
        SessionError::BadConfig(_) | SessionError::UnknownCommand(_) | SessionError::InvalidValue(_) => value_error(e),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// JSON when the text opens with `{`, TOML otherwise.
fn parse_config(text: &str) -> PyResult<SessionConfig> {
    let parsed =
        if text.trim_start().starts_with('{') { SessionConfig::from_json(text) } else { SessionConfig::from_toml(text) };
    parsed.map_err(session_error)
}

#[derive(Serialize)]
struct HeadlessResult<'a> {
    session_dir: &'a std::path::Path,
    status: &'a session::StatusReport,
    stims: &'a [sleeploop::swdetect::StimEvent],
    hypnogram: Vec<HypnogramRecord>,
    wall_secs: f64,
    graph_secs: f64,
}

/// Runs a session config (TOML or JSON text) to completion and returns its summary.
#[pyfunction]
fn run_headless<'py>(py: Python<'py>, config: &str, data_dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config)?;
    let s = py.detach(|| session::run_headless(cfg, &data_dir, RunOptions::default())).map_err(session_error)?;
    let result = HeadlessResult {
        session_dir: &s.session_dir,
        status: &s.status,
        stims: &s.stims,
        hypnogram: s
            .hypnogram
            .iter()
            .map(|e| HypnogramRecord { epoch_index: e.epoch_index, stage: e.stage_smoothed, confidence: e.confidence })
            .collect(),
        wall_secs: s.wall_secs,
        graph_secs: s.graph_secs,
    };
    to_py(py, &result)
}

/// Reads a session event log; returns `{"events": [...], "complete": bool}`.
#[pyfunction]
fn read_event_log<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let log = session::read_event_log(&path).map_err(session_error)?;
    #[derive(Serialize)]
    struct Out<'a> {
        events: &'a [session::SessionEvent],
        complete: bool,
    }
    to_py(py, &Out { events: &log.events, complete: log.is_complete() })
}

/// Mean power (uV^2) of `samples` between `low` and `high` Hz.
#[pyfunction]
fn band_power(samples: Vec<f64>, sample_rate: f64, low: f64, high: f64) -> PyResult<f64> {
    welch_band_power(&samples, sample_rate, Band { low, high }).map_err(value_error)
}

/// One stimulus burst of pink noise.
#[pyfunction]
#[pyo3(signature = (duration, audio_rate=44_100, level=0.5, seed=0))]
fn pink_noise(duration: f64, audio_rate: u32, level: f64, seed: u64) -> PyResult<Vec<f32>> {
    gen_pink_noise(duration, audio_rate, level, seed).map_err(value_error)
}

/// Causal majority-of-three smoothing over stage names ("W", "N1", "N2", "N3", "REM").
#[pyfunction]
fn smooth_hypnogram(stages: Vec<String>) -> PyResult<Vec<String>> {
    let raw: Vec<SleepStage> = stages.iter().map(|s| s.parse().map_err(value_error)).collect::<PyResult<_>>()?;
    Ok(smooth(&raw).iter().map(ToString::to_string).collect())
}

/// Synthetic EEG for one stage, first channel, at 250 Hz.
#[pyfunction]
#[pyo3(signature = (stage, duration, seed=0))]
fn synth_stage_eeg(stage: &str, duration: f64, seed: u64) -> PyResult<Vec<f64>> {
    let stage: SleepStage = stage.parse().map_err(value_error)?;
    let chunks = synth(stage, duration, seed).map_err(value_error)?;
    Ok(channel_samples(&chunks, 0))
}

/// A live session owner, the same one the HTTP server wraps.
#[pyclass(name = "SessionManager")]
struct PySessionManager {
    inner: SessionManager,
}

#[pymethods]
impl PySessionManager {
    #[new]
    fn new(data_dir: PathBuf) -> Self {
        PySessionManager { inner: SessionManager::new(data_dir) }
    }

    fn start<'py>(&self, py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
        let cfg = parse_config(config)?;
        let report = py.detach(|| self.inner.start(cfg)).map_err(session_error)?;
        to_py(py, &report)
    }

    fn status<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.snapshot())
    }

    /// Takes the wire form, e.g. `'{"cmd": "set_astim_mode", "mode": "Sham"}'`.
    fn command<'py>(&self, py: Python<'py>, command: &str) -> PyResult<Bound<'py, PyAny>> {
        let cmd = ControlCommand::from_json(command).map_err(session_error)?;
        to_py(py, &self.inner.command(cmd).map_err(session_error)?)
    }

    fn stop<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| self.inner.stop()).map_err(session_error)?;
        to_py(py, &report)
    }
}

#[pymodule]
#[pyo3(name = "sleeploop")]
fn sleeploop_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_headless, m)?)?;
    m.add_function(wrap_pyfunction!(read_event_log, m)?)?;
    m.add_function(wrap_pyfunction!(band_power, m)?)?;
    m.add_function(wrap_pyfunction!(pink_noise, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_hypnogram, m)?)?;
    m.add_function(wrap_pyfunction!(synth_stage_eeg, m)?)?;
    m.add_class::<PySessionManager>()?;
    m.add("DATA_DIR_ENV", session::DATA_DIR_ENV)?;
    Ok(())
}
