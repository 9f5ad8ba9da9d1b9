use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn blinklink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blinklink"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = blinklink(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(str::to_owned).collect()
}

/// Simulates "hello world" on a circle and returns the output directory.
fn simulated(extra: &[&str]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "simulate",
        "--text",
        "hello world",
        "--speed-px-s",
        "3000",
        "--out-dir",
        path(dir.path()),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

#[test]
fn simulate_writes_three_files() {
    let dir = simulated(&[]);
    let events = lines(&dir.path().join("events.csv"));
    assert!(events.len() > 1000);
    assert_eq!(lines(&dir.path().join("truth.csv"))[0], "t_us,x,y,l1,l2,theta,bit");
    assert_eq!(lines(&dir.path().join("schedule.csv"))[0], "t_us,level");
}

#[test]
fn simulate_is_seeded() {
    let (a, b) = (simulated(&["--seed", "3"]), simulated(&["--seed", "3"]));
    let c = simulated(&["--seed", "4"]);
    let read = |d: &TempDir| fs::read(d.path().join("events.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn binary_event_format_round_trips_through_run() {
    let dir = simulated(&["--format", "evb"]);
    let events = dir.path().join("events.evb");
    assert!(events.exists());
    let out = ok(&["run", "--events", path(&events), "--out-dir", path(dir.path())]);
    assert!(!out.is_empty());
    assert_eq!(fs::read(dir.path().join("decoded.bin")).unwrap(), b"hello world");
}

#[test]
fn missing_text_is_a_usage_error() {
    assert_eq!(blinklink(&["simulate"]).status.code(), Some(2));
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    assert_eq!(
        blinklink(&["encode", "--text", "a", "--carrier-hz", "fast"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn out_of_range_carrier_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = blinklink(&[
        "encode",
        "--text",
        "a",
        "--carrier-hz",
        "50",
        "--out-dir",
        path(dir.path()),
    ]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "pipeline.k_roi = 3\nmodem.colour = blue\n").unwrap();
    let out = blinklink(&[
        "encode",
        "--text",
        "a",
        "--config",
        path(&cfg),
        "--out-dir",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modem.colour"));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "pipeline.k_roi 3\n").unwrap();
    let out = blinklink(&[
        "encode",
        "--text",
        "a",
        "--config",
        path(&cfg),
        "--out-dir",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_event_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = blinklink(&["run", "--events", path(&missing), "--out-dir", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_scores_against_reference() {
    let dir = simulated(&[]);
    let reference = dir.path().join("ref.txt");
    fs::write(&reference, "hello world").unwrap();
    let p = dir.path();
    ok(&[
        "run",
        "--events",
        path(&p.join("events.csv")),
        "--reference",
        path(&reference),
        "--truth",
        path(&p.join("truth.csv")),
        "--out-dir",
        path(p),
    ]);
    assert_eq!(fs::read(p.join("decoded.bin")).unwrap(), b"hello world");
    let words = lines(&p.join("words.csv"));
    assert_eq!(
        words,
        ["index,reference,decoded,correct", "0,hello,hello,1", "1,world,world,1"]
    );
    let timing = lines(&p.join("timing.csv"));
    assert_eq!(
        timing[0],
        "packet,t_start_us,events_in,events_filtered,events_gated,step_us,over_budget"
    );
    assert!(timing.len() > 10);
    let trace = lines(&p.join("trace.csv"));
    assert_eq!(trace[0], "t_us,x,y,vx,vy,l1,l2,theta,omega,step_us");
}

#[test]
fn ekf_trace_has_clamp_column() {
    let dir = simulated(&[]);
    let p = dir.path();
    ok(&[
        "run",
        "--events",
        path(&p.join("events.csv")),
        "--tracker",
        "ekf",
        "--out-dir",
        path(p),
    ]);
    let trace = lines(&p.join("trace.csv"));
    assert!(trace[0].ends_with(",clamped"));
    assert_eq!(trace[1].split(',').count(), 11);
}

#[test]
fn realtime_and_concurrent_runs_decode() {
    let dir = simulated(&[]);
    let p = dir.path();
    for flag in ["--realtime", "--concurrent"] {
        ok(&[
            "run",
            "--events",
            path(&p.join("events.csv")),
            flag,
            "--out-dir",
            path(p),
        ]);
        assert_eq!(fs::read(p.join("decoded.bin")).unwrap(), b"hello world", "{flag}");
    }
}

#[test]
fn flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "# carrier from file\nmodem.carrier_hz = 1000\n").unwrap();
    let d = path(dir.path());
    let from_file = ok(&["encode", "--text", "ab", "--config", path(&cfg), "--out-dir", d]);
    assert!(from_file.contains("at 1000 Hz"), "{from_file}");
    let from_flag = ok(&[
        "encode",
        "--text",
        "ab",
        "--config",
        path(&cfg),
        "--carrier-hz",
        "2000",
        "--out-dir",
        d,
    ]);
    assert!(from_flag.contains("at 2000 Hz"), "{from_flag}");
}

#[test]
fn encode_reads_text_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let msg = dir.path().join("msg.txt");
    fs::write(&msg, "A").unwrap();
    let at = format!("@{}", path(&msg));
    let out = ok(&[
        "encode",
        "--text",
        &at,
        "--carrier-hz",
        "5000",
        "--out-dir",
        path(dir.path()),
    ]);
    assert!(out.starts_with("1 bytes"), "{out}");
    let sched = lines(&dir.path().join("schedule.csv"));
    assert_eq!(sched[0], "t_us,level");
    assert!(sched.len() > 2);
}

#[test]
fn bench_covers_carriers_and_trackers() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "bench",
        "--repeats",
        "1",
        "--duration-ms",
        "40",
        "--out-dir",
        path(dir.path()),
    ]);
    let rows = lines(&dir.path().join("bench.csv"));
    assert_eq!(rows[0], "freq_hz,tracker,mean_us,p99_us,max_us,events_per_packet");
    assert_eq!(rows.len(), 9);
}

#[test]
fn report_fills_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "report",
        "--repeats",
        "1",
        "--words",
        "5",
        "--out-dir",
        path(dir.path()),
    ]);
    let rows = lines(&dir.path().join("speed_accuracy.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 4));
}
