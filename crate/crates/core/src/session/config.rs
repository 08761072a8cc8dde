use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SessionError;
use crate::msgbus::ReplaySpeed;
use crate::signal_io::{Derivation, JitterModel};
use crate::staging::RuleThresholds;
use crate::subject_sim::{NightPlan, StimResponseModel};
use crate::swdetect::AStimConfig;
use crate::thermal::ThermalConfig;

/// Night plan given literally or generated from a few parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlanSpec {
    Explicit(NightPlan),
    Typical { seed: u64, sleep_onset_latency: f64, sleep_hours: f64 },
}

impl PlanSpec {
    pub fn resolve(&self) -> NightPlan {
        match self {
            PlanSpec::Explicit(p) => p.clone(),
            PlanSpec::Typical { seed, sleep_onset_latency, sleep_hours } => {
                NightPlan::typical(*seed, *sleep_onset_latency, sleep_hours * 3600.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    EdfReplay {
        path: PathBuf,
        #[serde(default)]
        speed: ReplaySpeed,
    },
    DcmLogReplay {
        path: PathBuf,
        #[serde(default)]
        speed: ReplaySpeed,
    },
    SimulatedSubject {
        plan: PlanSpec,
        #[serde(default)]
        response: StimResponseModel,
        #[serde(default)]
        speed: ReplaySpeed,
        #[serde(default = "no_jitter")]
        jitter: JitterModel,
    },
}

fn no_jitter() -> JitterModel {
    JitterModel::NONE
}

impl SourceConfig {
    pub fn speed(&self) -> ReplaySpeed {
        match self {
            SourceConfig::EdfReplay { speed, .. }
            | SourceConfig::DcmLogReplay { speed, .. }
            | SourceConfig::SimulatedSubject { speed, .. } => *speed,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            SourceConfig::EdfReplay { path, .. } | SourceConfig::DcmLogReplay { path, .. } => Some(path),
            SourceConfig::SimulatedSubject { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StagerConfig {
    RuleBased {
        #[serde(default)]
        thresholds: RuleThresholds,
    },
    /// `host:port` of a line-delimited JSON stager.
    External { endpoint: String },
}

impl Default for StagerConfig {
    fn default() -> Self {
        StagerConfig::RuleBased { thresholds: RuleThresholds::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectorConfig {
    /// Records drive a simulated pad.
    #[default]
    SimulatedPlant,
    /// Records are written line by line to a device or file, e.g. a serial port.
    Line { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
    pub source: SourceConfig,
    #[serde(default)]
    pub astim: AStimConfig,
    #[serde(default)]
    pub thermal: ThermalConfig,
    #[serde(default)]
    pub stager: StagerConfig,
    #[serde(default)]
    pub effector: EffectorConfig,
    /// Overrides the recording's own channel derivation.
    #[serde(default)]
    pub derivation: Option<Derivation>,
    /// Channel used for epoch features.
    #[serde(default)]
    pub staging_channel: usize,
    /// Seeds the stimulus audio.
    #[serde(default)]
    pub seed: u64,
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self, SessionError> {
        toml::from_str(text).map_err(|e| SessionError::BadConfig(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        serde_json::from_str(text).map_err(|e| SessionError::BadConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SessionError::BadConfig(format!("cannot read {}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    /// A simulated night with default effector settings.
    pub fn simulated(session_id: impl Into<String>, plan: NightPlan, speed: ReplaySpeed) -> Self {
        SessionConfig {
            session_id: session_id.into(),
            seed: plan.seed,
            source: SourceConfig::SimulatedSubject {
                plan: PlanSpec::Explicit(plan),
                response: StimResponseModel::default(),
                speed,
                jitter: JitterModel::NONE,
            },
            astim: AStimConfig::default(),
            thermal: ThermalConfig::default(),
            stager: StagerConfig::default(),
            effector: EffectorConfig::default(),
            derivation: None,
            staging_channel: 0,
        }
    }

    /// Checks invariants that do not need the data directory.
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::BadConfig(m));
        let id_ok = !self.session_id.is_empty()
            && self.session_id.len() <= 128
            && self.session_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            && !self.session_id.starts_with('.');
        if !id_ok {
            return bad(format!("session_id {:?} must be 1-128 characters of [A-Za-z0-9._-]", self.session_id));
        }
        if !self.source.speed().is_valid() {
            return bad(format!("replay speed {} is not valid", self.source.speed()));
        }
        if let Some(p) = self.source.path() {
            if !p.is_file() {
                return bad(format!("recording {} does not exist", p.display()));
            }
        }
        if let SourceConfig::SimulatedSubject { plan, response, jitter, .. } = &self.source {
            plan.resolve().validate().map_err(|e| SessionError::BadConfig(e.to_string()))?;
            response.validate().map_err(|e| SessionError::BadConfig(e.to_string()))?;
            if !(jitter.latency_mean >= 0.0 && jitter.latency_sd >= 0.0) {
                return bad("jitter mean and sd must be non-negative".into());
            }
        }
        if let StagerConfig::External { endpoint } = &self.stager {
            if endpoint.trim().is_empty() {
                return bad("external stager endpoint is empty".into());
            }
        }
        self.astim.validate().map_err(|e| SessionError::BadConfig(e.to_string()))?;
        self.thermal.validate().map_err(|e| SessionError::BadConfig(e.to_string()))?;
        Ok(())
    }
}
