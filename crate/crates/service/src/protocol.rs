//! Websocket wire schema: one JSON object per text frame, discriminated by
//! `"type"`.

use latshield_core::dubins::DubinsParams;
use latshield_core::filter::FilterMode;
use latshield_core::session::{Command, ConfigPatch, TickRecord};
use latshield_core::{ActionIndex, State};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ERR_MALFORMED: &str = "malformed";
pub const ERR_UNKNOWN_TYPE: &str = "unknown_type";
pub const ERR_INVALID_ACTION: &str = "invalid_action";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Action {
        omega_index: u8,
    },
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<[f64; 3]>,
    },
    Config {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mode: Option<FilterMode>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        epsilon_risk: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        enabled: Option<bool>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleInfo {
    pub c: [f64; 2],
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        dt: f64,
        action_table: [f64; 3],
        bounds: [[f64; 2]; 2],
        obstacle: ObstacleInfo,
    },
    Tick {
        t: u64,
        state: [f64; 3],
        value: f64,
        margin: f64,
        requested: u8,
        executed: u8,
        overridden: bool,
        failure: bool,
    },
    Error {
        code: String,
    },
}

impl ServerMessage {
    pub fn hello(p: &DubinsParams) -> Self {
        ServerMessage::Hello {
            dt: p.dt,
            action_table: p.action_table(),
            bounds: p.bounds,
            obstacle: ObstacleInfo {
                c: p.obstacle_center,
                r: p.obstacle_radius,
            },
        }
    }

    pub fn tick(r: &TickRecord) -> Self {
        ServerMessage::Tick {
            t: r.t,
            state: r.state.to_array(),
            value: r.value,
            margin: r.margin,
            requested: r.requested.into(),
            executed: r.executed.into(),
            overridden: r.overridden,
            failure: r.failure,
        }
    }

    pub fn error(code: &str) -> Self {
        ServerMessage::Error { code: code.to_string() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// Parses one client frame. Errors carry the wire error code.
pub fn parse_client(text: &str) -> Result<ClientMessage, &'static str> {
    let v: Value = serde_json::from_str(text).map_err(|_| ERR_MALFORMED)?;
    let kind = v.get("type").and_then(Value::as_str).ok_or(ERR_MALFORMED)?;
    if !matches!(kind, "action" | "reset" | "config") {
        return Err(ERR_UNKNOWN_TYPE);
    }
    serde_json::from_value(v).map_err(|_| ERR_MALFORMED)
}

impl ClientMessage {
    /// Converts to a session command, validating action indices and states.
    pub fn into_command(self) -> Result<Command, &'static str> {
        match self {
            ClientMessage::Action { omega_index } => ActionIndex::try_from(omega_index)
                .map(Command::Action)
                .map_err(|_| ERR_INVALID_ACTION),
            ClientMessage::Reset { state: None } => Ok(Command::Reset(None)),
            ClientMessage::Reset { state: Some([x, y, th]) } => State::new(x, y, th)
                .map(|s| Command::Reset(Some(s)))
                .map_err(|_| "invalid_state"),
            ClientMessage::Config {
                mode,
                epsilon,
                epsilon_risk,
                enabled,
            } => Ok(Command::Config(ConfigPatch {
                mode,
                epsilon,
                epsilon_risk,
                enabled,
            })),
        }
    }
}
