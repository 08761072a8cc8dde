use serde::{Deserialize, Serialize};

use super::{ConfigSnapshot, SessionError};
use crate::msgbus::{BusPayload, PayloadKind};
use crate::swdetect::StimMode;
use crate::thermal::ThermalMode;

/// Operator request, encoded on the wire as `{"cmd": "<name>", ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlCommand {
    SetAstimMode {
        mode: StimMode,
    },
    SetThermal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<ThermalMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        neutral_setpoint: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cool_setpoint: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ramp_duration: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wake_revert_after: Option<f64>,
    },
    MarkNote {
        text: String,
    },
    StopSession,
}

impl BusPayload for ControlCommand {
    const KIND: PayloadKind = PayloadKind::ControlCommand;
}

const KNOWN: [&str; 4] = ["set_astim_mode", "set_thermal", "mark_note", "stop_session"];

pub const MAX_NOTE_LEN: usize = 4096;

impl ControlCommand {
    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::SetAstimMode { .. } => KNOWN[0],
            ControlCommand::SetThermal { .. } => KNOWN[1],
            ControlCommand::MarkNote { .. } => KNOWN[2],
            ControlCommand::StopSession => KNOWN[3],
        }
    }

    /// Parses a JSON command, telling unknown commands apart from bad arguments.
    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| SessionError::InvalidValue(format!("not a JSON object: {e}")))?;
        let name = value
            .get("cmd")
            .and_then(|c| c.as_str())
            .ok_or_else(|| SessionError::InvalidValue("missing string field \"cmd\"".into()))?;
        if !KNOWN.contains(&name) {
            return Err(SessionError::UnknownCommand(name.to_string()));
        }
        serde_json::from_value(value).map_err(|e| SessionError::InvalidValue(e.to_string()))
    }

    /// Effector settings after this command, or `None` if it changes none.
    pub fn apply_to(&self, before: &ConfigSnapshot) -> Result<Option<ConfigSnapshot>, SessionError> {
        let mut after = before.clone();
        match self {
            ControlCommand::SetAstimMode { mode } => after.astim.mode = *mode,
            ControlCommand::SetThermal { mode, neutral_setpoint, cool_setpoint, ramp_duration, wake_revert_after } => {
                let t = &mut after.thermal;
                if let Some(m) = mode {
                    t.mode = *m;
                }
                if let Some(v) = neutral_setpoint {
                    t.neutral_setpoint = *v;
                }
                if let Some(v) = cool_setpoint {
                    t.cool_setpoint = *v;
                }
                if let Some(v) = ramp_duration {
                    t.ramp_duration = *v;
                }
                if let Some(v) = wake_revert_after {
                    t.wake_revert_after = *v;
                }
                for v in [t.neutral_setpoint, t.cool_setpoint, t.ramp_duration, t.wake_revert_after] {
                    if !v.is_finite() {
                        return Err(SessionError::InvalidValue(format!("{v} is not finite")));
                    }
                }
                t.validate().map_err(|e| SessionError::InvalidValue(e.to_string()))?;
            }
            ControlCommand::MarkNote { text } => {
                if text.len() > MAX_NOTE_LEN {
                    return Err(SessionError::InvalidValue(format!("note longer than {MAX_NOTE_LEN} bytes")));
                }
                return Ok(None);
            }
            ControlCommand::StopSession => return Ok(None),
        }
        Ok(Some(after))
    }
}
