use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use xpv_core::estimate::EstimateReport;
use xpv_core::measure::OutcomeRecord;

use crate::server::{compute_report, ingest_batch, SessionConfig};
use crate::wire::WireMessage;
use crate::{Result, ServiceError};

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

/// One line of a session transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptLine {
    Session {
        t_ms: u64,
        session_id: String,
        schedule_ref: String,
        config: SessionConfig,
    },
    Message {
        seq: u64,
        t_ms: u64,
        conn: u64,
        /// Platform bound to the connection when the message was handled.
        platform: Option<String>,
        direction: Direction,
        message: WireMessage,
    },
    Malformed {
        seq: u64,
        t_ms: u64,
        conn: u64,
        line: String,
    },
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptLine>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Recomputes the session report from a transcript alone.
///
/// Applies the verifier's ingestion rules to every inbound `Records`
/// message: foreign schedule hashes abort, invalid batches are dropped
/// whole and repeated unitary indices keep their first copy.
pub fn replay_transcript(path: &Path) -> Result<EstimateReport> {
    let lines = read_transcript(path)?;
    let Some(TranscriptLine::Session {
        schedule_ref,
        config,
        ..
    }) = lines.first()
    else {
        return Err(ServiceError::Protocol(
            "transcript does not start with a session line".into(),
        ));
    };
    let mut stores: BTreeMap<String, BTreeMap<usize, OutcomeRecord>> = BTreeMap::new();
    for line in &lines[1..] {
        let TranscriptLine::Message {
            platform: Some(id),
            direction: Direction::In,
            message,
            ..
        } = line
        else {
            continue;
        };
        if let WireMessage::Records {
            schedule_ref: r,
            records,
        } = message
        {
            if r != schedule_ref {
                return Err(ServiceError::Aborted(format!(
                    "platform {id} submitted records for schedule {r}"
                )));
            }
            let store = stores.entry(id.clone()).or_default();
            let _ = ingest_batch(store, records, config.schedule.n_u);
        }
    }
    compute_report(config, schedule_ref, &stores)
}
