//! Session state machine behind the wire protocol. Transport-free, so the
//! same code drives live connections and log replay.

use std::collections::BTreeMap;
use std::sync::Arc;

use duet_core::checkpoint::Checkpoint;
use duet_core::corpus::SEED_STEPS;
use duet_core::generator::{DuetTokens, Session, SessionError, POLICY_SCHEME};
use duet_core::models::DuetNet;
use duet_core::rl::warm_start;
use duet_core::score::{Token, STEPS_PER_MEASURE};
use thiserror::Error;

use crate::protocol::{Body, ErrorCode, WireMessage};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("checkpoint {0} cannot drive generation")]
    NotAPolicy(String),
}

/// Read-only policies shared by every session.
#[derive(Debug, Clone)]
pub struct Engine {
    policies: BTreeMap<String, Arc<DuetNet<f32>>>,
    default: String,
}

impl Engine {
    pub fn new(name: &str, policy: DuetNet<f32>) -> Self {
        Engine {
            policies: BTreeMap::from([(name.to_string(), Arc::new(policy))]),
            default: name.to_string(),
        }
    }

    /// Accepts a generation checkpoint or a view-(a) checkpoint, which
    /// shares its shape.
    pub fn from_checkpoint(name: &str, ckpt: &Checkpoint) -> Result<Self, EngineError> {
        let policy = warm_start(ckpt).map_err(|_| EngineError::NotAPolicy(name.to_string()))?;
        Ok(Engine::new(name, policy))
    }

    pub fn with_policy(mut self, name: &str, policy: DuetNet<f32>) -> Self {
        self.policies.insert(name.to_string(), Arc::new(policy));
        self
    }

    pub fn default_name(&self) -> &str {
        &self.default
    }

    pub fn policy(&self, name: &str) -> Option<&Arc<DuetNet<f32>>> {
        self.policies.get(name)
    }

    /// Pure form of [`Engine::apply`]: returns the next state and the reply.
    pub fn handle(&self, state: &SessionState, msg: &WireMessage) -> (SessionState, WireMessage) {
        let mut next = state.clone();
        let reply = self.apply(&mut next, msg);
        (next, reply)
    }

    /// Applies one client message. A reply of kind ERROR means `state` was
    /// not touched.
    pub fn apply(&self, state: &mut SessionState, msg: &WireMessage) -> WireMessage {
        match self.dispatch(state, msg) {
            Ok(reply) => WireMessage::new(Some(state.id.clone()), reply),
            Err((code, message)) => WireMessage::error(Some(state.id.clone()), code, message),
        }
    }

    fn dispatch(
        &self,
        state: &mut SessionState,
        msg: &WireMessage,
    ) -> Result<Body, (ErrorCode, String)> {
        if state.ended {
            return Err((ErrorCode::State, "session has ended".into()));
        }
        match &msg.body {
            Body::Init {
                checkpoint,
                human_seed,
                machine_seed,
                ..
            } => {
                if state.session.is_some() {
                    return Err((ErrorCode::State, "session already initialised".into()));
                }
                let name = checkpoint.clone().unwrap_or_else(|| self.default.clone());
                let policy = self.policies.get(&name).ok_or_else(|| {
                    (
                        ErrorCode::Checkpoint,
                        format!("unknown checkpoint {name:?}"),
                    )
                })?;
                let h = parse_seed(human_seed)?;
                let m = parse_seed(machine_seed)?;
                let session = Session::new(policy.clone(), &h, &m).map_err(token_error)?;
                let t = session.t();
                if let Some(id) = &msg.session {
                    state.id = id.clone();
                }
                state.session = Some(session);
                state.checkpoint = name.clone();
                Ok(Body::InitAck {
                    checkpoint: name,
                    human_seed: labels(&h),
                    machine_seed: labels(&m),
                    step: t,
                })
            }
            Body::Step { step, token } => {
                let session = active(state)?;
                let t = session.t();
                if *step != t {
                    return Err((ErrorCode::Order, format!("expected step {t}, got {step}")));
                }
                let (h, _) = session.role().streams();
                let id = parse_label(token, session.streams()[h].last().copied())?;
                let action = session.step(id).map_err(token_error)?;
                Ok(Body::StepAck {
                    step: t,
                    token: label(action),
                })
            }
            Body::Switch { step } => {
                let session = active(state)?;
                let t = session.t();
                if step.is_some_and(|s| s != t) {
                    return Err((
                        ErrorCode::Order,
                        format!("switch requested for step {step:?} at step {t}"),
                    ));
                }
                if t % STEPS_PER_MEASURE != 0 {
                    return Err((
                        ErrorCode::Boundary,
                        format!("step {t} is not a measure boundary"),
                    ));
                }
                let role = session.switch_roles().map_err(token_error)?;
                Ok(Body::SwitchAck { step: t, role })
            }
            Body::End { .. } => {
                let session = active(state)?;
                let duet = session.end().map_err(token_error)?;
                state.ended = true;
                Ok(Body::End { duet: Some(duet) })
            }
            other => Err((
                ErrorCode::Protocol,
                format!(
                    "{} is a server message",
                    WireMessage::new(None, other.clone()).kind()
                ),
            )),
        }
    }
}

/// Per-connection state. `id` is assigned by the transport; INIT may
/// override it.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub id: String,
    pub checkpoint: String,
    pub session: Option<Session>,
    pub ended: bool,
}

impl SessionState {
    pub fn new(id: impl Into<String>) -> Self {
        SessionState {
            id: id.into(),
            checkpoint: String::new(),
            session: None,
            ended: false,
        }
    }

    pub fn transcript(&self) -> Option<DuetTokens> {
        self.session.as_ref().map(Session::transcript)
    }
}

fn active(state: &mut SessionState) -> Result<&mut Session, (ErrorCode, String)> {
    state
        .session
        .as_mut()
        .ok_or_else(|| (ErrorCode::State, "no session; send INIT first".into()))
}

fn token_error(e: SessionError) -> (ErrorCode, String) {
    let code = match e {
        SessionError::MidMeasure(_) => ErrorCode::Boundary,
        SessionError::Ended => ErrorCode::State,
        _ => ErrorCode::Token,
    };
    (code, e.to_string())
}

pub fn label(id: usize) -> String {
    POLICY_SCHEME
        .token(id)
        .expect("policy ids are in vocabulary")
        .label()
}

fn labels(ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&id| label(id)).collect()
}

/// Resolves a label to a policy-vocabulary id. `HOLD` continues whatever
/// pitch `prev` sounds.
pub fn parse_label(text: &str, prev: Option<usize>) -> Result<usize, (ErrorCode, String)> {
    let unknown = || (ErrorCode::Token, format!("unknown token {text:?}"));
    match Token::parse(text).map_err(|_| unknown())? {
        Token::Pad => Err(unknown()),
        Token::Hold => {
            let pitch = prev.and_then(|id| match POLICY_SCHEME.token(id)? {
                Token::Pitch(p) | Token::PitchHold(p) => Some(p),
                _ => None,
            });
            pitch.and_then(|p| POLICY_SCHEME.hold_id(p)).ok_or_else(|| {
                (
                    ErrorCode::Token,
                    "HOLD does not continue a sounding pitch".into(),
                )
            })
        }
        tok => POLICY_SCHEME.id(tok).ok_or_else(unknown),
    }
}

fn parse_seed(seed: &[String]) -> Result<Vec<usize>, (ErrorCode, String)> {
    if seed.is_empty() {
        let rest = POLICY_SCHEME.id(Token::Rest).expect("rest id");
        return Ok(vec![rest; SEED_STEPS]);
    }
    let mut ids: Vec<usize> = Vec::with_capacity(seed.len());
    for s in seed {
        ids.push(parse_label(s, ids.last().copied())?);
    }
    Ok(ids)
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("log line {line} is not a wire message: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("log never opens a session")]
    NoSession,
}

/// Re-runs the client side of a session log and returns its duet. The log
/// may contain server replies; they are skipped. An empty log is the
/// all-rest seed.
pub fn replay(engine: &Engine, log: &[WireMessage]) -> Result<DuetTokens, ReplayError> {
    if log.is_empty() {
        let rest = POLICY_SCHEME.id(Token::Rest).expect("rest id");
        return Ok(DuetTokens {
            scheme: POLICY_SCHEME,
            human: vec![rest; SEED_STEPS],
            machine: vec![rest; SEED_STEPS],
        });
    }
    let mut state = SessionState::new("replay");
    for msg in log {
        if matches!(
            msg.body,
            Body::Init { .. } | Body::Step { .. } | Body::Switch { .. } | Body::End { duet: None }
        ) {
            engine.apply(&mut state, msg);
        }
    }
    state.transcript().ok_or(ReplayError::NoSession)
}

/// [`replay`] over a line-delimited JSON log.
pub fn replay_text(engine: &Engine, text: &str) -> Result<DuetTokens, ReplayError> {
    let log = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReplayError::Corrupt {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<WireMessage>, _>>()?;
    replay(engine, &log)
}
