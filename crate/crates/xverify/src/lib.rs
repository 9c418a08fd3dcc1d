//! Verifier service for cross-platform comparisons.
//!
//! A verifier hands one unitary schedule to two platform clients, collects
//! their outcome records and returns the fidelity report to both. Messages
//! are newline-delimited JSON objects over TCP, each tagged by `"type"`.

mod client;
mod server;
mod transcript;
mod wire;

pub use client::{client_run, client_run_with, ClientOptions, ClientSource};
pub use server::{serve, serve_on, PlatformState, SessionConfig, SessionOutcome, SessionState};
pub use transcript::{read_transcript, replay_transcript, Direction, TranscriptLine};
pub use wire::{ErrorCode, ScheduleOffer, WireMessage, WireRecord, MAX_BATCH, PROTOCOL_VERSION};

use xpv_core::XpvError;

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] XpvError),
    #[error("verifier replied {code:?}: {detail}")]
    Remote { code: ErrorCode, detail: String },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("session aborted: {0}")]
    Aborted(String),
    #[error("timed out: {0}")]
    Timeout(String),
}

/// Implementation tag advertised in `Hello`; seed-form schedules are only
/// offered when both clients report this exact value.
pub fn implementation_tag() -> String {
    format!("xpv-core/{}", env!("CARGO_PKG_VERSION"))
}
