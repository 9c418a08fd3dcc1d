use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;

use xpv_core::estimate::{estimate_fidelities, EstimateReport, HammingKernel};
use xpv_core::measure::{acquire_dataset, MeasurementDataset, Outcomes, Shots};
use xpv_core::qcore::{prepare_state, StateKind, StateSpec};
use xpv_core::randsrc::{sample_schedule, Ensemble, ScheduleMode, ScheduleParams};
use xverify::{
    client_run, client_run_with, read_transcript, replay_transcript, serve_on, ClientOptions,
    ClientSource, Direction, ErrorCode, ServiceError, SessionConfig, SessionOutcome,
    TranscriptLine, WireMessage,
};

fn params(n_u: usize, n: usize, seed: u64) -> ScheduleParams {
    ScheduleParams {
        mode: ScheduleMode::Local,
        ensemble: Ensemble::HaarCue,
        n_u,
        num_sites: n,
        local_dim: 2,
        master_seed: seed,
    }
}

fn start(
    config: SessionConfig,
) -> (
    SocketAddr,
    thread::JoinHandle<xverify::Result<SessionOutcome>>,
) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    (addr, thread::spawn(move || serve_on(listener, config)))
}

fn spec(seed: u64) -> StateSpec {
    StateSpec::new(StateKind::PureProduct, 3, seed)
}

fn sim(seed: u64, shots: Shots, shot_seed: u64) -> ClientSource {
    ClientSource::Simulate {
        state: spec(seed),
        shots,
        seed: shot_seed,
    }
}

fn join(
    addr: SocketAddr,
    id: &'static str,
    src: ClientSource,
) -> thread::JoinHandle<xverify::Result<EstimateReport>> {
    thread::spawn(move || client_run(addr, id, src))
}

fn local_pipeline(
    cfg: &SessionConfig,
    a: &MeasurementDataset,
    b: &MeasurementDataset,
) -> EstimateReport {
    let k = HammingKernel::local(cfg.schedule.num_sites, 2);
    estimate_fidelities(a, b, &k, cfg.variant, Some(&cfg.bootstrap)).unwrap()
}

fn bits(r: &EstimateReport) -> String {
    serde_json::to_string(r).unwrap()
}

#[test]
fn exact_identical_platforms_report_unit_fidelity() {
    let cfg = SessionConfig::new(params(60, 3, 1));
    let (addr, server) = start(cfg);
    let a = join(addr, "alpha", sim(5, Shots::Exact, 0));
    let b = join(addr, "beta", sim(5, Shots::Exact, 0));
    let ra = a.join().unwrap().unwrap();
    let rb = b.join().unwrap().unwrap();
    let out = server.join().unwrap().unwrap();
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(bits(&ra), bits(&out.report));
    let se = ra.se_f_max.unwrap();
    assert!(
        (ra.f_max - 1.0).abs() <= se.max(1e-12),
        "F_max {} se {se}",
        ra.f_max
    );
    assert!(out
        .state
        .platforms
        .values()
        .all(|p| p.complete && p.received_records == 60));
}

#[test]
fn service_report_is_bit_identical_to_library_path() {
    let mut cfg = SessionConfig::new(params(150, 3, 2));
    cfg.bootstrap.seed = 77;
    let (addr, server) = start(cfg.clone());
    let a = join(addr, "alpha", sim(1, Shots::Count(40), 11));
    let b = join(addr, "beta", sim(2, Shots::Count(40), 12));
    let report = a.join().unwrap().unwrap();
    b.join().unwrap().unwrap();
    server.join().unwrap().unwrap();

    let schedule = sample_schedule(&cfg.schedule).unwrap();
    let da = acquire_dataset(
        &prepare_state(&spec(1)).unwrap(),
        &schedule,
        Shots::Count(40),
        11,
        "alpha",
    )
    .unwrap();
    let db = acquire_dataset(
        &prepare_state(&spec(2)).unwrap(),
        &schedule,
        Shots::Count(40),
        12,
        "beta",
    )
    .unwrap();
    assert_eq!(bits(&report), bits(&local_pipeline(&cfg, &da, &db)));
}

#[test]
fn theory_client_against_sampled_experiment() {
    let cfg = SessionConfig::new(params(200, 3, 3));
    let (addr, server) = start(cfg);
    let theory = join(addr, "theory", sim(9, Shots::Exact, 0));
    let exp = join(addr, "experiment", sim(9, Shots::Count(200), 4));
    let r = exp.join().unwrap().unwrap();
    theory.join().unwrap().unwrap();
    server.join().unwrap().unwrap();
    assert_eq!(r.n_m1, Some(200));
    assert_eq!(r.n_m2, None);
    assert!(
        (r.f_max - 1.0).abs() < 4.0 * r.se_f_max.unwrap() + 0.02,
        "{r:?}"
    );
}

#[test]
fn split_halves_match_direct_split_estimate() {
    let cfg = SessionConfig::new(params(120, 3, 4));
    let schedule = sample_schedule(&cfg.schedule).unwrap();
    let state = prepare_state(&spec(3)).unwrap();
    let half_1 = acquire_dataset(&state, &schedule, Shots::Count(50), 21, "half-1").unwrap();
    let half_2 = acquire_dataset(&state, &schedule, Shots::Count(50), 22, "half-2").unwrap();
    // Both halves together form one 100-shot dataset.
    for (a, b) in half_1.records.iter().zip(&half_2.records) {
        if let (Outcomes::Counts { shots: s1, .. }, Outcomes::Counts { shots: s2, .. }) =
            (&a.outcomes, &b.outcomes)
        {
            assert_eq!(s1 + s2, 100);
        }
    }
    let direct = local_pipeline(&cfg, &half_1, &half_2);
    let (addr, server) = start(cfg);
    let a = join(addr, "half-1", ClientSource::Dataset(Box::new(half_1)));
    let b = join(addr, "half-2", ClientSource::Dataset(Box::new(half_2)));
    let r = a.join().unwrap().unwrap();
    b.join().unwrap().unwrap();
    server.join().unwrap().unwrap();
    assert_eq!(bits(&r), bits(&direct));
}

#[test]
fn foreign_schedule_is_rejected_without_report() {
    let cfg = SessionConfig::new(params(40, 3, 5));
    let other = sample_schedule(&params(40, 3, 999)).unwrap();
    let foreign = acquire_dataset(
        &prepare_state(&spec(1)).unwrap(),
        &other,
        Shots::Count(20),
        1,
        "rogue",
    )
    .unwrap();
    let (addr, server) = start(cfg);
    let good = join(addr, "good", sim(1, Shots::Count(20), 1));
    let rogue = join(addr, "rogue", ClientSource::Dataset(Box::new(foreign)));
    match rogue.join().unwrap() {
        Err(ServiceError::Remote { code, .. }) => assert_eq!(code, ErrorCode::ScheduleMismatch),
        other => panic!("expected SCHEDULE_MISMATCH, got {other:?}"),
    }
    assert!(good.join().unwrap().is_err());
    assert!(matches!(
        server.join().unwrap(),
        Err(ServiceError::Aborted(_))
    ));
}

#[test]
fn transcript_replays_to_the_same_report_and_never_forwards() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.ndjson");
    let mut cfg = SessionConfig::new(params(100, 3, 6));
    cfg.transcript = Some(path.clone());
    let (addr, server) = start(cfg);
    let a = join(addr, "alpha", sim(1, Shots::Count(30), 1));
    let b = join(addr, "beta", sim(4, Shots::Count(30), 2));
    a.join().unwrap().unwrap();
    b.join().unwrap().unwrap();
    let out = server.join().unwrap().unwrap();
    assert_eq!(bits(&replay_transcript(&path).unwrap()), bits(&out.report));

    let lines = read_transcript(&path).unwrap();
    assert!(matches!(lines[0], TranscriptLine::Session { .. }));
    let mut inbound_records = 0;
    for l in &lines {
        if let TranscriptLine::Message {
            direction,
            message,
            t_ms,
            ..
        } = l
        {
            assert!(*t_ms > 0);
            match direction {
                Direction::Out => assert!(matches!(
                    message,
                    WireMessage::ScheduleOffer(_)
                        | WireMessage::Ack { .. }
                        | WireMessage::Report { .. }
                        | WireMessage::Error { .. }
                )),
                Direction::In => {
                    if let WireMessage::Records { records, .. } = message {
                        assert!(records.len() <= xverify::MAX_BATCH);
                        inbound_records += records.len();
                    }
                }
            }
        }
    }
    assert_eq!(inbound_records, 200);
}

#[test]
fn dropped_connection_resumes_from_last_ack() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ndjson");
    let mut cfg = SessionConfig::new(params(200, 3, 7));
    cfg.transcript = Some(path.clone());
    let (addr, server) = start(cfg.clone());
    let flaky = thread::spawn(move || {
        let opts = ClientOptions {
            drop_after_batches: Some(2),
            ..ClientOptions::default()
        };
        client_run_with(addr, "alpha", sim(1, Shots::Count(25), 1), &opts)
    });
    let steady = join(addr, "beta", sim(1, Shots::Count(25), 2));
    let r = flaky.join().unwrap().unwrap();
    steady.join().unwrap().unwrap();
    server.join().unwrap().unwrap();

    let schedule = sample_schedule(&cfg.schedule).unwrap();
    let state = prepare_state(&spec(1)).unwrap();
    let da = acquire_dataset(&state, &schedule, Shots::Count(25), 1, "alpha").unwrap();
    let db = acquire_dataset(&state, &schedule, Shots::Count(25), 2, "beta").unwrap();
    assert_eq!(bits(&r), bits(&local_pipeline(&cfg, &da, &db)));

    let offers: Vec<usize> = read_transcript(&path)
        .unwrap()
        .into_iter()
        .filter_map(|l| match l {
            TranscriptLine::Message {
                message: WireMessage::ScheduleOffer(o),
                platform: Some(p),
                ..
            } if p == "alpha" => Some(o.resume_from),
            _ => None,
        })
        .collect();
    assert_eq!(offers, vec![0, 128]);
}

fn raw_exchange(addr: SocketAddr, line: &str) -> (TcpStream, BufReader<TcpStream>) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(line.as_bytes()).unwrap();
    s.write_all(b"\n").unwrap();
    let r = BufReader::new(s.try_clone().unwrap());
    (s, r)
}

fn next_message(r: &mut BufReader<TcpStream>) -> Option<WireMessage> {
    let mut line = String::new();
    (r.read_line(&mut line).unwrap() > 0).then(|| serde_json::from_str(&line).unwrap())
}

#[test]
fn malformed_json_and_third_platform_are_refused() {
    let mut cfg = SessionConfig::new(params(10, 2, 8));
    cfg.seed_form = true;
    let (addr, server) = start(cfg);

    let (_s, mut r) = raw_exchange(addr, "{not json");
    assert!(matches!(
        next_message(&mut r),
        Some(WireMessage::Error {
            code: ErrorCode::BadMessage,
            ..
        })
    ));
    assert!(
        next_message(&mut r).is_none(),
        "connection must close after BAD_MESSAGE"
    );

    let hello = |id: &str| {
        format!(
            r#"{{"type":"hello","platform_id":"{id}","protocol_version":1,"implementation":"{}"}}"#,
            xverify::implementation_tag()
        )
    };
    let (_a, mut ra) = raw_exchange(addr, &hello("a"));
    let (_b, mut rb) = raw_exchange(addr, &hello("b"));
    for r in [&mut ra, &mut rb] {
        match next_message(r) {
            Some(WireMessage::ScheduleOffer(o)) => {
                assert!(
                    o.unitaries.is_none() && o.params.is_some(),
                    "matching implementations get the seed form"
                );
                assert_eq!(o.schedule().unwrap().len(), 10);
            }
            other => panic!("expected offer, got {other:?}"),
        }
    }
    let (_c, mut rc) = raw_exchange(addr, &hello("c"));
    assert!(matches!(
        next_message(&mut rc),
        Some(WireMessage::Error {
            code: ErrorCode::SessionFull,
            ..
        })
    ));
    drop((_a, _b, ra, rb));
    // The session never completes; stop it through its idle timeout instead of waiting.
    drop(server);
}
