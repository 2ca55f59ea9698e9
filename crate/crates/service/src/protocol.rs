//! Wire schema v1. Every frame is one JSON object with a mandatory
//! `"v": 1`, a `kind`, an optional `session` id and the kind's payload.

use duet_core::generator::{DuetTokens, Role};
use serde::{Deserialize, Serialize};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub v: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(flatten)]
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Body {
    Init {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint: Option<String>,
        /// Seed labels per stream; omitted seeds are two measures of rest.
        #[serde(default)]
        human_seed: Vec<String>,
        #[serde(default)]
        machine_seed: Vec<String>,
        /// Informational only; stepping is client-clocked.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tempo: Option<f64>,
    },
    InitAck {
        checkpoint: String,
        human_seed: Vec<String>,
        machine_seed: Vec<String>,
        /// First step the client will send.
        step: usize,
    },
    Step {
        step: usize,
        token: String,
    },
    StepAck {
        step: usize,
        token: String,
    },
    Switch {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<usize>,
    },
    SwitchAck {
        step: usize,
        role: Role,
    },
    End {
        /// Present on the server's reply: the duet token file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duet: Option<DuetTokens>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    /// Step index is not the next expected one.
    #[serde(rename = "E_ORDER")]
    Order,
    /// Unknown label, or a hold that continues nothing.
    #[serde(rename = "E_TOKEN")]
    Token,
    /// Role switch away from a measure boundary.
    #[serde(rename = "E_BOUNDARY")]
    Boundary,
    /// Message not valid in the current session state.
    #[serde(rename = "E_STATE")]
    State,
    /// Unparseable frame or wrong schema version.
    #[serde(rename = "E_PROTOCOL")]
    Protocol,
    /// Unknown checkpoint name.
    #[serde(rename = "E_CHECKPOINT")]
    Checkpoint,
}

impl WireMessage {
    pub fn new(session: Option<String>, body: Body) -> Self {
        WireMessage {
            v: WIRE_VERSION,
            session,
            body,
        }
    }

    pub fn error(session: Option<String>, code: ErrorCode, message: impl Into<String>) -> Self {
        WireMessage::new(
            session,
            Body::Error {
                code,
                message: message.into(),
            },
        )
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            Body::Init { .. } => "INIT",
            Body::InitAck { .. } => "INIT_ACK",
            Body::Step { .. } => "STEP",
            Body::StepAck { .. } => "STEP_ACK",
            Body::Switch { .. } => "SWITCH",
            Body::SwitchAck { .. } => "SWITCH_ACK",
            Body::End { .. } => "END",
            Body::Error { .. } => "ERROR",
        }
    }

    /// Parses a text frame, rejecting other schema versions.
    pub fn parse(text: &str) -> Result<WireMessage, WireMessage> {
        let msg: WireMessage = serde_json::from_str(text).map_err(|e| {
            WireMessage::error(None, ErrorCode::Protocol, format!("malformed frame: {e}"))
        })?;
        if msg.v != WIRE_VERSION {
            return Err(WireMessage::error(
                msg.session,
                ErrorCode::Protocol,
                format!("unsupported version {}, expected {WIRE_VERSION}", msg.v),
            ));
        }
        Ok(msg)
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let step = WireMessage::new(
            Some("s1".into()),
            Body::Step {
                step: 32,
                token: "P60".into(),
            },
        );
        let text = step.to_text();
        assert_eq!(
            text,
            r#"{"v":1,"session":"s1","kind":"STEP","step":32,"token":"P60"}"#
        );
        assert_eq!(WireMessage::parse(&text).unwrap(), step);
        let err = WireMessage::error(None, ErrorCode::Order, "x");
        assert!(err.to_text().contains(r#""code":"E_ORDER""#));
    }

    #[test]
    fn version_is_mandatory() {
        let missing = WireMessage::parse(r#"{"kind":"END"}"#).unwrap_err();
        let wrong = WireMessage::parse(r#"{"v":2,"kind":"END"}"#).unwrap_err();
        for m in [missing, wrong] {
            assert!(matches!(
                m.body,
                Body::Error {
                    code: ErrorCode::Protocol,
                    ..
                }
            ));
        }
        assert!(WireMessage::parse(r#"{"v":1,"kind":"END"}"#).is_ok());
    }
}
