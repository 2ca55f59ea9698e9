//! Live duet sessions over a websocket. A client opens a session with
//! INIT, then sends one STEP per sixteenth-note tick carrying the human's
//! token and receives the machine's token for the same step in STEP_ACK.
//! SWITCH swaps parts at a measure boundary; END returns the duet.

pub mod engine;
pub mod protocol;
pub mod server;

pub use engine::{replay, replay_text, Engine, ReplayError, SessionState};
pub use protocol::{Body, ErrorCode, WireMessage, WIRE_VERSION};
