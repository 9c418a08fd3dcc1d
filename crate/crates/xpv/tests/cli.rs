use std::process::Command;

fn xpv(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_xpv"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "xpv {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_then_estimate_identical_exact_platforms() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    for (name, platform) in [("a.ndjson", "a"), ("b.ndjson", "b")] {
        xpv(&[
            "simulate",
            "--state",
            "pr:3:5",
            "--schedule-seed",
            "9",
            "--nu",
            "60",
            "--nm",
            "exact",
            "--out",
            &path(name),
            "--platform",
            platform,
        ]);
    }
    let json = xpv(&[
        "estimate",
        "--ds1",
        &path("a.ndjson"),
        "--ds2",
        &path("b.ndjson"),
        "--json",
        "--resamples",
        "60",
    ]);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert!(
        (report["f_max"].as_f64().unwrap() - 1.0).abs() < 1e-10,
        "{report}"
    );
    assert!(
        (report["f_gm"].as_f64().unwrap() - 1.0).abs() < 1e-10,
        "{report}"
    );
}

#[test]
fn estimate_refuses_datasets_from_different_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    xpv(&[
        "simulate",
        "--state",
        "pp:2",
        "--schedule-seed",
        "1",
        "--nu",
        "10",
        "--nm",
        "50",
        "--out",
        &path("a.ndjson"),
    ]);
    xpv(&[
        "simulate",
        "--state",
        "pp:2",
        "--schedule-seed",
        "2",
        "--nu",
        "10",
        "--nm",
        "50",
        "--out",
        &path("b.ndjson"),
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_xpv"))
        .args([
            "estimate",
            "--ds1",
            &path("a.ndjson"),
            "--ds2",
            &path("b.ndjson"),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn scaling_study_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("plan.json");
    std::fs::write(&config, r#"{"study": "error_vs_nm", "n_a": [3], "n_u": [30], "n_m": [8, 16, 32, 64], "trials": 10}"#)
        .unwrap();
    let out = dir.path().join("out");
    let stdout = xpv(&[
        "scaling",
        "--study",
        "error-vs-nm",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("exponent"), "{stdout}");
    assert!(out.join("error_vs_nm.csv").is_file());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["plan"]["trials"], 10);
}
