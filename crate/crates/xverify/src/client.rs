use std::io::{BufReader, ErrorKind};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use xpv_core::estimate::EstimateReport;
use xpv_core::measure::{acquire_dataset, MeasurementDataset, Shots};
use xpv_core::qcore::{prepare_state, StateSpec};

use crate::wire::{
    recv, send, ScheduleOffer, WireMessage, WireRecord, MAX_BATCH, PROTOCOL_VERSION,
};
use crate::{implementation_tag, Result, ServiceError};

/// Where a platform client gets its records.
#[derive(Debug, Clone)]
pub enum ClientSource {
    /// Simulate the state under the offered schedule.
    Simulate {
        state: StateSpec,
        shots: Shots,
        seed: u64,
    },
    /// Submit an existing dataset as is.
    Dataset(Box<MeasurementDataset>),
    /// Load a dataset file (NDJSON).
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Records per batch, capped at [`MAX_BATCH`].
    pub batch_size: usize,
    pub max_reconnects: usize,
    pub read_timeout_ms: u64,
    /// Fault injection: drop the connection once after this many
    /// acknowledged batches.
    pub drop_after_batches: Option<usize>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            batch_size: MAX_BATCH,
            max_reconnects: 3,
            read_timeout_ms: 120_000,
            drop_after_batches: None,
        }
    }
}

pub fn client_run(
    addr: impl ToSocketAddrs + Clone,
    platform_id: &str,
    source: ClientSource,
) -> Result<EstimateReport> {
    client_run_with(addr, platform_id, source, &ClientOptions::default())
}

struct ClientState {
    session_id: Option<String>,
    data: Option<MeasurementDataset>,
    batches_sent: usize,
    dropped: bool,
}

fn connection_lost(e: &ServiceError) -> bool {
    matches!(e, ServiceError::Io(io) if matches!(
        io.kind(),
        ErrorKind::UnexpectedEof | ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe
    ))
}

/// Joins a session, streams this platform's records and waits for the report.
///
/// After a lost connection the client reconnects with its session id and
/// resumes from the first unitary the verifier has not acknowledged.
pub fn client_run_with(
    addr: impl ToSocketAddrs + Clone,
    platform_id: &str,
    source: ClientSource,
    opts: &ClientOptions,
) -> Result<EstimateReport> {
    let mut st = ClientState {
        session_id: None,
        data: None,
        batches_sent: 0,
        dropped: false,
    };
    let mut reconnects = 0;
    loop {
        match attempt(addr.clone(), platform_id, &source, opts, &mut st) {
            Err(e)
                if connection_lost(&e)
                    && st.session_id.is_some()
                    && reconnects < opts.max_reconnects =>
            {
                reconnects += 1;
                log::info!("{platform_id}: connection lost ({e}); resuming");
                thread::sleep(Duration::from_millis(20));
            }
            other => return other,
        }
    }
}

fn eof() -> ServiceError {
    ServiceError::Io(std::io::Error::new(
        ErrorKind::UnexpectedEof,
        "verifier closed the connection",
    ))
}

fn expect_msg(reader: &mut BufReader<TcpStream>) -> Result<WireMessage> {
    match recv(reader)? {
        None => Err(eof()),
        Some(WireMessage::Error { code, detail }) => Err(ServiceError::Remote { code, detail }),
        Some(m) => Ok(m),
    }
}

fn load(
    source: &ClientSource,
    offer: &ScheduleOffer,
    platform_id: &str,
) -> Result<MeasurementDataset> {
    Ok(match source {
        ClientSource::Simulate { state, shots, seed } => {
            let schedule = offer.schedule()?;
            acquire_dataset(
                &prepare_state(state)?,
                &schedule,
                *shots,
                *seed,
                platform_id,
            )?
        }
        ClientSource::Dataset(ds) => (**ds).clone(),
        ClientSource::File(path) => {
            MeasurementDataset::read_ndjson(BufReader::new(std::fs::File::open(path)?))?
        }
    })
}

fn attempt(
    addr: impl ToSocketAddrs,
    platform_id: &str,
    source: &ClientSource,
    opts: &ClientOptions,
    st: &mut ClientState,
) -> Result<EstimateReport> {
    let stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_millis(opts.read_timeout_ms)))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    send(
        &mut writer,
        &WireMessage::Hello {
            platform_id: platform_id.to_string(),
            protocol_version: PROTOCOL_VERSION,
            implementation: Some(implementation_tag()),
            session_id: st.session_id.clone(),
        },
    )?;
    let offer = match expect_msg(&mut reader)? {
        WireMessage::ScheduleOffer(o) => o,
        other => {
            return Err(ServiceError::Protocol(format!(
                "expected a schedule offer, got {other:?}"
            )))
        }
    };
    st.session_id = Some(offer.session_id.clone());
    if st.data.is_none() {
        st.data = Some(load(source, &offer, platform_id)?);
    }
    let data = st.data.as_ref().expect("loaded");
    let batch = opts.batch_size.clamp(1, MAX_BATCH);
    let start = offer.resume_from.min(data.records.len());
    for chunk in data.records[start..].chunks(batch) {
        let records: Vec<WireRecord> = chunk.iter().map(WireRecord::from).collect();
        send(
            &mut writer,
            &WireMessage::Records {
                schedule_ref: data.schedule_ref.clone(),
                records,
            },
        )?;
        match expect_msg(&mut reader)? {
            WireMessage::Ack { .. } => {}
            other => {
                return Err(ServiceError::Protocol(format!(
                    "expected an ack, got {other:?}"
                )))
            }
        }
        st.batches_sent += 1;
        if !st.dropped && opts.drop_after_batches == Some(st.batches_sent) {
            st.dropped = true;
            let _ = writer.shutdown(Shutdown::Both);
            return Err(ServiceError::Io(std::io::Error::new(
                ErrorKind::ConnectionAborted,
                "injected drop",
            )));
        }
    }
    send(&mut writer, &WireMessage::Complete {})?;
    loop {
        match expect_msg(&mut reader)? {
            WireMessage::Report { report } => return Ok(report),
            WireMessage::Ack { .. } => {}
            other => {
                return Err(ServiceError::Protocol(format!(
                    "expected a report, got {other:?}"
                )))
            }
        }
    }
}
