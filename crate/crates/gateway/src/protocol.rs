//! Wire messages.
//!
//! Client → server:
//! ```json
//! {"v":1,"request_id":7,"kind":"set_mode","payload":{"mode":"full_body"}}
//! {"v":1,"request_id":8,"kind":"apply_wrench","payload":{"frame":"ee","wrench":[0,10,0,0,0,0],"duration_ms":500}}
//! {"v":1,"request_id":9,"kind":"pause"}
//! ```
//! Payloads: `set_mode {mode}`, `set_lowlevel {lowlevel}`, `set_scenario {scenario}`,
//! `set_gamma {task: ee|posture, value: number|null}`, `apply_wrench {frame, wrench, duration_ms}`;
//! the other kinds take none.
//!
//! Server → client: `{"v":1,"type":"state",...}`, `{"v":1,"type":"ack",...}`,
//! `{"v":1,"type":"error",...}`.

use serde::{Deserialize, Serialize};

use phri_core::lowlevel::LowLevelKind;
use phri_core::modes::{ComplianceMode, GammaTarget, ModeCommand, Scenario};
use phri_core::sim::{SimCommand, StateSnapshot, WrenchCommand};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    SetMode,
    SetLowlevel,
    SetScenario,
    SetGamma,
    ApplyWrench,
    ClearWrench,
    Pause,
    Resume,
    EmergencyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandMsg {
    pub v: u32,
    pub request_id: u64,
    pub kind: CommandKind,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub payload: serde_json::Value,
}

/// Typed form of a command, after payload validation.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Mode(ModeCommand),
    ApplyWrench(WrenchCommand),
    ClearWrench,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {got} (expected {PROTOCOL_VERSION})")]
    Version { got: u32, request_id: Option<u64> },
}

impl ProtocolError {
    pub fn request_id(&self) -> Option<u64> {
        match self {
            ProtocolError::Version { request_id, .. } => *request_id,
            ProtocolError::Malformed(_) => None,
        }
    }
}

#[derive(Deserialize)]
struct ModePayload {
    mode: ComplianceMode,
}
#[derive(Deserialize)]
struct LowlevelPayload {
    lowlevel: LowLevelKind,
}
#[derive(Deserialize)]
struct ScenarioPayload {
    scenario: Scenario,
}
#[derive(Deserialize)]
struct GammaPayload {
    task: GammaTarget,
    value: Option<f64>,
}

impl CommandMsg {
    pub fn new(request_id: u64, kind: CommandKind, payload: serde_json::Value) -> Self {
        Self { v: PROTOCOL_VERSION, request_id, kind, payload }
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let msg: Self = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if msg.v != PROTOCOL_VERSION {
            return Err(ProtocolError::Version { got: msg.v, request_id: Some(msg.request_id) });
        }
        Ok(msg)
    }

    /// Validates the payload for `kind`.
    pub fn command(&self) -> Result<Command, String> {
        fn take<T: serde::de::DeserializeOwned>(kind: CommandKind, p: &serde_json::Value) -> Result<T, String> {
            T::deserialize(p).map_err(|e| format!("bad {} payload: {e}", serde_json::to_string(&kind).unwrap_or_default()))
        }
        let p = &self.payload;
        let unit = |c: Command| if p.is_null() || p.as_object().is_some_and(|o| o.is_empty()) { Ok(c) } else { Err("this command takes no payload".to_string()) };
        match self.kind {
            CommandKind::SetMode => take::<ModePayload>(self.kind, p).map(|x| Command::Mode(ModeCommand::SetMode { mode: x.mode })),
            CommandKind::SetLowlevel => {
                take::<LowlevelPayload>(self.kind, p).map(|x| Command::Mode(ModeCommand::SetLowlevel { lowlevel: x.lowlevel }))
            }
            CommandKind::SetScenario => {
                take::<ScenarioPayload>(self.kind, p).map(|x| Command::Mode(ModeCommand::SetScenario { scenario: x.scenario }))
            }
            CommandKind::SetGamma => {
                let x = take::<GammaPayload>(self.kind, p)?;
                if x.value.is_some_and(|v| !v.is_finite()) {
                    return Err("gamma must be finite".into());
                }
                Ok(Command::Mode(ModeCommand::SetGamma { task: x.task, value: x.value }))
            }
            CommandKind::ApplyWrench => take::<WrenchCommand>(self.kind, p).map(Command::ApplyWrench),
            CommandKind::ClearWrench => unit(Command::ClearWrench),
            CommandKind::Pause => unit(Command::Mode(ModeCommand::Pause)),
            CommandKind::Resume => unit(Command::Mode(ModeCommand::Resume)),
            CommandKind::EmergencyStop => unit(Command::Mode(ModeCommand::EmergencyStop)),
        }
    }

    pub fn to_sim_command(&self) -> Result<SimCommand, String> {
        Ok(match self.command()? {
            Command::Mode(m) => SimCommand::Mode(m),
            Command::ApplyWrench(w) => SimCommand::ApplyWrench(w),
            Command::ClearWrench => SimCommand::ClearWrench,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckResult {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub request_id: u64,
    pub result: AckResult,
    pub reason: Option<String>,
}

impl Ack {
    pub fn accepted(request_id: u64) -> Self {
        Self { request_id, result: AckResult::Accepted, reason: None }
    }

    pub fn rejected(request_id: u64, reason: String) -> Self {
        Self { request_id, result: AckResult::Rejected, reason: Some(reason) }
    }
}

/// Telemetry frame: the simulation snapshot plus delivery bookkeeping.
/// `seq` numbers published updates (it keeps increasing while paused).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    #[serde(flatten)]
    pub snapshot: StateSnapshot,
    /// Updates this client has lost to backpressure so far.
    pub dropped: u64,
}

impl StateUpdate {
    pub fn new(seq: u64, mut snapshot: StateSnapshot) -> Self {
        snapshot.seq = seq;
        Self { snapshot, dropped: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ServerMsg {
    State(StateUpdate),
    Ack(Ack),
    Error { reason: String, request_id: Option<u64> },
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    v: u32,
    #[serde(flatten)]
    body: T,
}

impl ServerMsg {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Envelope { v: PROTOCOL_VERSION, body: self }).expect("server messages always serialize")
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let e: Envelope<ServerMsg> = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
        if e.v != PROTOCOL_VERSION {
            return Err(ProtocolError::Version { got: e.v, request_id: None });
        }
        Ok(e.body)
    }
}
