use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use xpv_core::estimate::EstimateReport;
use xpv_core::measure::{OutcomeRecord, RecordLine};
use xpv_core::randsrc::{
    sample_schedule, ScheduleMode, ScheduleParams, UnitarySchedule, UnitaryWire,
};

use crate::{Result, ServiceError};

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest `Records` batch a client may send.
pub const MAX_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    ScheduleMismatch,
    SessionFull,
    BadMessage,
    Protocol,
    Aborted,
}

/// Schedule as sent to clients: explicit matrices, or generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOffer {
    pub session_id: String,
    pub schedule_ref: String,
    pub mode: ScheduleMode,
    pub num_sites: usize,
    pub local_dim: usize,
    pub n_u: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unitaries: Option<Vec<UnitaryWire>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ScheduleParams>,
    /// First unitary index the verifier still needs from this client.
    #[serde(default)]
    pub resume_from: usize,
}

impl ScheduleOffer {
    /// Rebuilds the schedule and checks it against the offered hash.
    pub fn schedule(&self) -> Result<UnitarySchedule> {
        let schedule = match (&self.unitaries, &self.params) {
            (Some(w), _) => {
                UnitarySchedule::from_wire(self.mode, self.num_sites, self.local_dim, w)?
            }
            (None, Some(p)) => sample_schedule(p)?,
            (None, None) => {
                return Err(ServiceError::Protocol(
                    "schedule offer carries neither matrices nor parameters".into(),
                ))
            }
        };
        if schedule.schedule_ref() != self.schedule_ref {
            return Err(ServiceError::Protocol(
                "offered schedule does not hash to its schedule_ref".into(),
            ));
        }
        Ok(schedule)
    }
}

/// Record as sent over the wire; counts travel as `[outcome, count]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub u: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<(usize, u64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

impl From<&OutcomeRecord> for WireRecord {
    fn from(r: &OutcomeRecord) -> Self {
        let line = RecordLine::from(r);
        WireRecord {
            u: line.u,
            counts: line.counts.map(|c| c.into_iter().collect()),
            shots: line.shots,
            probs: line.probs,
        }
    }
}

impl WireRecord {
    pub fn into_record(self) -> xpv_core::Result<OutcomeRecord> {
        if let Some(c) = &self.counts {
            if c.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(xpv_core::XpvError::Format(format!(
                    "record {}: outcomes not strictly increasing",
                    self.u
                )));
            }
        }
        RecordLine {
            u: self.u,
            counts: self.counts.map(|c| c.into_iter().collect()),
            shots: self.shots,
            probs: self.probs,
        }
        .into_record()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        platform_id: String,
        protocol_version: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        implementation: Option<String>,
        /// Set when reconnecting to an existing session.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session_id: Option<String>,
    },
    ScheduleOffer(ScheduleOffer),
    Records {
        schedule_ref: String,
        records: Vec<WireRecord>,
    },
    Ack {
        /// Every unitary below this index has been ingested.
        next_u: usize,
    },
    Complete {},
    Report {
        report: EstimateReport,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
}

impl WireMessage {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        WireMessage::Error {
            code,
            detail: detail.into(),
        }
    }
}

pub(crate) fn send<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    let mut line = serde_json::to_string(msg)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Next message, or `None` at end of stream.
pub(crate) fn recv<R: BufRead>(r: &mut R) -> Result<Option<WireMessage>> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            return Ok(Some(serde_json::from_str(line.trim_end())?));
        }
    }
}
