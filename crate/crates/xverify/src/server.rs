use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use xpv_core::estimate::{estimate_fidelities, EstimateReport, EstimatorVariant, HammingKernel};
use xpv_core::measure::{MeasurementDataset, OutcomeRecord, Outcomes};
use xpv_core::randsrc::{sample_schedule, ScheduleParams, UnitarySchedule};
use xpv_core::resample::BootstrapConfig;

use crate::transcript::{now_ms, Direction, TranscriptLine};
use crate::wire::{
    send, ErrorCode, ScheduleOffer, WireMessage, WireRecord, MAX_BATCH, PROTOCOL_VERSION,
};
use crate::{implementation_tag, Result, ServiceError};

fn default_idle_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    #[serde(default)]
    pub session_id: Option<String>,
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub variant: EstimatorVariant,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    /// Offer generator parameters instead of matrices when both clients run
    /// this implementation.
    #[serde(default)]
    pub seed_form: bool,
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    #[serde(default = "default_idle_timeout_ms")]
    pub idle_timeout_ms: u64,
}

impl SessionConfig {
    pub fn new(schedule: ScheduleParams) -> Self {
        Self {
            session_id: None,
            schedule,
            variant: EstimatorVariant::UStatistic,
            bootstrap: BootstrapConfig::default(),
            seed_form: false,
            transcript: None,
            idle_timeout_ms: default_idle_timeout_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformState {
    pub received_records: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub session_id: String,
    pub schedule: UnitarySchedule,
    pub platforms: BTreeMap<String, PlatformState>,
    pub report: Option<EstimateReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub state: SessionState,
    pub report: EstimateReport,
}

/// Binds `bind` and runs one session to completion.
pub fn serve(bind: impl ToSocketAddrs, config: SessionConfig) -> Result<SessionOutcome> {
    serve_on(TcpListener::bind(bind)?, config)
}

/// Validates a batch and inserts records not seen before (first copy wins).
pub(crate) fn ingest_batch(
    store: &mut BTreeMap<usize, OutcomeRecord>,
    batch: &[WireRecord],
    n_u: usize,
) -> std::result::Result<(), String> {
    if batch.len() > MAX_BATCH {
        return Err(format!(
            "batch of {} records exceeds {MAX_BATCH}",
            batch.len()
        ));
    }
    let mut parsed = Vec::with_capacity(batch.len());
    for line in batch {
        let r = line.clone().into_record().map_err(|e| e.to_string())?;
        if r.u >= n_u {
            return Err(format!("unitary index {} outside schedule of {n_u}", r.u));
        }
        parsed.push(r);
    }
    for r in parsed {
        store.entry(r.u).or_insert(r);
    }
    Ok(())
}

/// Number of leading unitaries already ingested.
pub(crate) fn contiguous(store: &BTreeMap<usize, OutcomeRecord>) -> usize {
    store
        .keys()
        .enumerate()
        .take_while(|(i, u)| i == *u)
        .count()
}

/// Report over the two platforms' records, platform ids in lexical order.
pub(crate) fn compute_report(
    config: &SessionConfig,
    schedule_ref: &str,
    stores: &BTreeMap<String, BTreeMap<usize, OutcomeRecord>>,
) -> Result<EstimateReport> {
    if stores.len() != 2 {
        return Err(ServiceError::Protocol(format!(
            "report needs two platforms, have {}",
            stores.len()
        )));
    }
    let p = &config.schedule;
    let mut ds = Vec::new();
    for (id, store) in stores {
        if contiguous(store) != p.n_u || store.len() != p.n_u {
            return Err(ServiceError::Protocol(format!(
                "platform {id} delivered {} of {} records",
                store.len(),
                p.n_u
            )));
        }
        let records: Vec<OutcomeRecord> = store.values().cloned().collect();
        let exact = records
            .iter()
            .all(|r| matches!(r.outcomes, Outcomes::Probs(_)));
        ds.push(MeasurementDataset::new(
            id.clone(),
            schedule_ref,
            p.num_sites,
            p.local_dim,
            exact,
            records,
        )?);
    }
    let kernel = HammingKernel {
        mode: p.mode,
        local_dim: p.local_dim,
        num_sites: p.num_sites,
    };
    Ok(estimate_fidelities(
        &ds[0],
        &ds[1],
        &kernel,
        config.variant,
        Some(&config.bootstrap),
    )?)
}

enum Event {
    Conn(u64, TcpStream),
    Line(u64, String),
    Closed(u64),
}

struct Slot {
    conn: Option<u64>,
    implementation: Option<String>,
    records: BTreeMap<usize, OutcomeRecord>,
    complete: bool,
    offered: bool,
}

struct Session {
    config: SessionConfig,
    schedule: UnitarySchedule,
    schedule_ref: String,
    session_id: String,
    writers: HashMap<u64, TcpStream>,
    conn_platform: HashMap<u64, String>,
    slots: BTreeMap<String, Slot>,
    transcript: Option<BufWriter<std::fs::File>>,
    seq: u64,
}

impl Session {
    fn log(&mut self, line: TranscriptLine) {
        if let Some(w) = self.transcript.as_mut() {
            let text = serde_json::to_string(&line).expect("transcript lines serialize");
            if let Err(e) = writeln!(w, "{text}") {
                log::warn!("transcript write failed: {e}");
            }
        }
    }

    fn log_message(&mut self, conn: u64, direction: Direction, message: &WireMessage) {
        self.seq += 1;
        let platform = self.conn_platform.get(&conn).cloned();
        self.log(TranscriptLine::Message {
            seq: self.seq,
            t_ms: now_ms(),
            conn,
            platform,
            direction,
            message: message.clone(),
        });
    }

    fn send_to(&mut self, conn: u64, msg: WireMessage) {
        self.log_message(conn, Direction::Out, &msg);
        if let Some(w) = self.writers.get_mut(&conn) {
            if let Err(e) = send(w, &msg) {
                log::warn!("send to connection {conn} failed: {e}");
            }
        }
    }

    fn close(&mut self, conn: u64) {
        if let Some(w) = self.writers.remove(&conn) {
            let _ = w.shutdown(Shutdown::Both);
        }
        if let Some(id) = self.conn_platform.remove(&conn) {
            if let Some(slot) = self.slots.get_mut(&id) {
                if slot.conn == Some(conn) {
                    slot.conn = None;
                }
            }
        }
    }

    fn fail(&mut self, conn: u64, code: ErrorCode, detail: String, close: bool) {
        log::warn!("connection {conn}: {code:?}: {detail}");
        self.send_to(conn, WireMessage::Error { code, detail });
        if close {
            self.close(conn);
        }
    }

    fn offer_for(&self, id: &str) -> ScheduleOffer {
        let tag = implementation_tag();
        let seed_form = self.config.seed_form
            && self.slots.len() == 2
            && self
                .slots
                .values()
                .all(|s| s.implementation.as_deref() == Some(tag.as_str()));
        ScheduleOffer {
            session_id: self.session_id.clone(),
            schedule_ref: self.schedule_ref.clone(),
            mode: self.schedule.mode(),
            num_sites: self.schedule.num_sites(),
            local_dim: self.schedule.local_dim(),
            n_u: self.schedule.len(),
            unitaries: (!seed_form).then(|| self.schedule.to_wire()),
            params: seed_form.then_some(self.config.schedule),
            resume_from: self.slots.get(id).map_or(0, |s| contiguous(&s.records)),
        }
    }

    fn send_offer(&mut self, id: &str) {
        let Some(conn) = self.slots.get(id).and_then(|s| s.conn) else {
            return;
        };
        let offer = self.offer_for(id);
        self.slots.get_mut(id).expect("slot exists").offered = true;
        self.send_to(conn, WireMessage::ScheduleOffer(offer));
    }

    fn hello(
        &mut self,
        conn: u64,
        platform_id: String,
        version: u32,
        implementation: Option<String>,
        session_id: Option<String>,
    ) {
        if version != PROTOCOL_VERSION {
            return self.fail(
                conn,
                ErrorCode::BadMessage,
                format!("unsupported protocol version {version}"),
                true,
            );
        }
        if self.conn_platform.contains_key(&conn) {
            return self.fail(conn, ErrorCode::Protocol, "duplicate hello".into(), false);
        }
        if let Some(slot) = self.slots.get(&platform_id) {
            if session_id.as_deref() != Some(self.session_id.as_str()) {
                return self.fail(
                    conn,
                    ErrorCode::Protocol,
                    format!("platform {platform_id} already joined"),
                    true,
                );
            }
            // Resumption; a stale connection of the same platform is dropped.
            if let Some(old) = slot.conn {
                self.close(old);
            }
            let slot = self.slots.get_mut(&platform_id).expect("slot exists");
            slot.conn = Some(conn);
            let offered = slot.offered;
            self.conn_platform.insert(conn, platform_id.clone());
            if offered {
                self.send_offer(&platform_id);
            }
            return;
        }
        if self.slots.len() >= 2 {
            return self.fail(
                conn,
                ErrorCode::SessionFull,
                "session already has two platforms".into(),
                true,
            );
        }
        self.slots.insert(
            platform_id.clone(),
            Slot {
                conn: Some(conn),
                implementation,
                records: BTreeMap::new(),
                complete: false,
                offered: false,
            },
        );
        self.conn_platform.insert(conn, platform_id);
        if self.slots.len() == 2 {
            let ids: Vec<String> = self.slots.keys().cloned().collect();
            for id in ids {
                self.send_offer(&id);
            }
        }
    }

    /// Handles one inbound line; returns the report once the session is done.
    fn on_line(&mut self, conn: u64, line: &str) -> Result<Option<EstimateReport>> {
        if line.trim().is_empty() {
            return Ok(None);
        }
        let msg: WireMessage = match serde_json::from_str(line) {
            Ok(m) => m,
            Err(e) => {
                self.seq += 1;
                let t = TranscriptLine::Malformed {
                    seq: self.seq,
                    t_ms: now_ms(),
                    conn,
                    line: line.to_string(),
                };
                self.log(t);
                self.fail(
                    conn,
                    ErrorCode::BadMessage,
                    format!("malformed message: {e}"),
                    true,
                );
                return Ok(None);
            }
        };
        self.log_message(conn, Direction::In, &msg);
        match msg {
            WireMessage::Hello {
                platform_id,
                protocol_version,
                implementation,
                session_id,
            } => {
                self.hello(
                    conn,
                    platform_id,
                    protocol_version,
                    implementation,
                    session_id,
                );
            }
            WireMessage::Records {
                schedule_ref,
                records,
            } => {
                let Some(id) = self.conn_platform.get(&conn).cloned() else {
                    self.fail(
                        conn,
                        ErrorCode::Protocol,
                        "records before hello".into(),
                        false,
                    );
                    return Ok(None);
                };
                if schedule_ref != self.schedule_ref {
                    let detail =
                        format!("platform {id} submitted records for schedule {schedule_ref}");
                    self.fail(conn, ErrorCode::ScheduleMismatch, detail.clone(), true);
                    let others: Vec<u64> = self.writers.keys().copied().collect();
                    for c in others {
                        self.fail(c, ErrorCode::Aborted, detail.clone(), true);
                    }
                    return Err(ServiceError::Aborted(detail));
                }
                let n_u = self.schedule.len();
                let slot = self.slots.get_mut(&id).expect("registered platform");
                match ingest_batch(&mut slot.records, &records, n_u) {
                    Ok(()) => {
                        let next_u = contiguous(&slot.records);
                        self.send_to(conn, WireMessage::Ack { next_u });
                    }
                    Err(detail) => self.fail(conn, ErrorCode::BadMessage, detail, true),
                }
            }
            WireMessage::Complete {} => {
                let Some(id) = self.conn_platform.get(&conn).cloned() else {
                    self.fail(
                        conn,
                        ErrorCode::Protocol,
                        "complete before hello".into(),
                        false,
                    );
                    return Ok(None);
                };
                let n_u = self.schedule.len();
                let slot = self.slots.get_mut(&id).expect("registered platform");
                let have = contiguous(&slot.records);
                if have < n_u {
                    self.fail(
                        conn,
                        ErrorCode::Protocol,
                        format!("complete after {have} of {n_u} records"),
                        false,
                    );
                    return Ok(None);
                }
                slot.complete = true;
                if self.slots.len() == 2 && self.slots.values().all(|s| s.complete) {
                    let stores: BTreeMap<String, BTreeMap<usize, OutcomeRecord>> = self
                        .slots
                        .iter()
                        .map(|(k, s)| (k.clone(), s.records.clone()))
                        .collect();
                    let report = compute_report(&self.config, &self.schedule_ref, &stores)?;
                    let conns: Vec<u64> = self.slots.values().filter_map(|s| s.conn).collect();
                    for c in conns {
                        self.send_to(
                            c,
                            WireMessage::Report {
                                report: report.clone(),
                            },
                        );
                    }
                    return Ok(Some(report));
                }
            }
            WireMessage::Error { code, detail } => {
                log::warn!("client {conn} reported {code:?}: {detail}")
            }
            other => {
                let kind = serde_json::to_value(&other)
                    .ok()
                    .and_then(|v| v["type"].as_str().map(String::from));
                self.fail(
                    conn,
                    ErrorCode::Protocol,
                    format!("unexpected {} from client", kind.unwrap_or_default()),
                    false,
                );
            }
        }
        Ok(None)
    }

    fn state(&self, report: Option<EstimateReport>) -> SessionState {
        SessionState {
            session_id: self.session_id.clone(),
            schedule: self.schedule.clone(),
            platforms: self
                .slots
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        PlatformState {
                            received_records: s.records.len(),
                            complete: s.complete,
                        },
                    )
                })
                .collect(),
            report,
        }
    }

    fn shutdown(&mut self) {
        let conns: Vec<u64> = self.writers.keys().copied().collect();
        for c in conns {
            self.close(c);
        }
        if let Some(w) = self.transcript.as_mut() {
            let _ = w.flush();
        }
    }
}

fn spawn_reader(id: u64, stream: TcpStream, tx: mpsc::Sender<Event>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        loop {
            line.clear();
            match reader.read_line(&mut line) {
                Ok(0) | Err(_) => break,
                Ok(_) => {
                    if tx
                        .send(Event::Line(id, line.trim_end().to_string()))
                        .is_err()
                    {
                        return;
                    }
                }
            }
        }
        let _ = tx.send(Event::Closed(id));
    });
}

/// Runs one session on an already bound listener.
///
/// Connection threads only read lines; every state change happens on the
/// calling thread, which owns the session.
pub fn serve_on(listener: TcpListener, config: SessionConfig) -> Result<SessionOutcome> {
    let schedule = sample_schedule(&config.schedule)?;
    let schedule_ref = schedule.schedule_ref();
    let session_id = config
        .session_id
        .clone()
        .unwrap_or_else(|| format!("session-{}", &schedule_ref[..16]));
    let transcript = match &config.transcript {
        Some(p) => Some(BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut session = Session {
        config: config.clone(),
        schedule,
        schedule_ref: schedule_ref.clone(),
        session_id: session_id.clone(),
        writers: HashMap::new(),
        conn_platform: HashMap::new(),
        slots: BTreeMap::new(),
        transcript,
        seq: 0,
    };
    session.log(TranscriptLine::Session {
        t_ms: now_ms(),
        session_id,
        schedule_ref,
        config: config.clone(),
    });

    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    listener.set_nonblocking(true)?;
    let acceptor = {
        let (tx, stop) = (tx.clone(), stop.clone());
        thread::spawn(move || {
            let mut next = 0u64;
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        next += 1;
                        if stream.set_nonblocking(false).is_err()
                            || tx.send(Event::Conn(next, stream)).is_err()
                        {
                            break;
                        }
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5))
                    }
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(5));
                    }
                }
            }
        })
    };

    let timeout = Duration::from_millis(config.idle_timeout_ms);
    let result = loop {
        let event = match rx.recv_timeout(timeout) {
            Ok(e) => e,
            Err(_) => {
                break Err(ServiceError::Timeout(format!(
                    "no activity for {} ms",
                    config.idle_timeout_ms
                )))
            }
        };
        match event {
            Event::Conn(id, stream) => {
                let reader = match stream.try_clone() {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("connection {id}: {e}");
                        continue;
                    }
                };
                session.writers.insert(id, stream);
                spawn_reader(id, reader, tx.clone());
            }
            Event::Line(id, line) => match session.on_line(id, &line) {
                Ok(Some(report)) => break Ok(report),
                Ok(None) => {}
                Err(e) => break Err(e),
            },
            Event::Closed(id) => session.close(id),
        }
    };
    stop.store(true, Ordering::Relaxed);
    let _ = acceptor.join();
    session.shutdown();
    let report = result?;
    Ok(SessionOutcome {
        state: session.state(Some(report.clone())),
        report,
    })
}
