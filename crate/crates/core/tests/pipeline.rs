use std::time::Duration;

use blinklink::modem::encode;
use blinklink::pipeline::{run, PipelineConfig, RunReport, TrackerKind};
use blinklink::simulate::{sample_text, simulate, LedModel, Simulation, Trajectory, TrajectoryKind};
use blinklink::SensorSize;

fn scene(text: &[u8], carrier: f64, speed: f64, led: &LedModel, seed: u64) -> Simulation {
    let sched = encode(text, carrier).unwrap().shifted(2000);
    let dur = sched.end_us + 20_000;
    let traj = if speed == 0.0 {
        Trajectory::new(TrajectoryKind::Stationary { pos: [640.0, 360.0] }, SensorSize::HD, dur).unwrap()
    } else {
        Trajectory::circular_with_speed([640.0, 360.0], 610.0, speed, SensorSize::HD, dur).unwrap()
    };
    simulate(&traj, led, &sched, seed).unwrap()
}

fn decode(sim: &Simulation, cfg: &PipelineConfig, text: &[u8]) -> RunReport {
    run(&sim.events, cfg, Some(&sim.truth.samples), Some(text)).unwrap()
}

/// Budget overruns that persist over three identical runs; a single-core host
/// occasionally preempts one packet for a scheduler tick.
fn persistent_violations(sim: &Simulation, cfg: &PipelineConfig) -> usize {
    let mut fewest = usize::MAX;
    for _ in 0..3 {
        fewest = fewest.min(run(&sim.events, cfg, None, None).unwrap().budget_violations);
        if fewest == 0 {
            break;
        }
    }
    fewest
}

#[test]
fn clean_stationary_hello_world() {
    let led = LedModel {
        noise_rate: 0.0,
        ..LedModel::default()
    };
    let sim = scene(b"hello world", 5000.0, 0.0, &led, 1);
    let rep = decode(&sim, &PipelineConfig::new(5000.0), b"hello world");
    assert_eq!(rep.decoded.bytes, b"hello world");
    assert_eq!(persistent_violations(&sim, &PipelineConfig::new(5000.0)), 0);
    assert_eq!(rep.causality_violations, 0);
    assert_eq!(rep.acquisitions, 1);
}

#[test]
fn circular_3000_px_s_at_5_khz_decodes() {
    let text = sample_text(21, 40);
    let sim = scene(&text, 5000.0, 3000.0, &LedModel::default(), 21);
    let rep = decode(&sim, &PipelineConfig::new(5000.0), &text);
    let acc = rep.accuracy.unwrap();
    assert!(acc.word >= 0.90, "word accuracy {}", acc.word);
    assert_eq!(rep.causality_violations, 0);
}

#[test]
fn report_accounting_is_exact() {
    let text = sample_text(22, 10);
    let sim = scene(&text, 5000.0, 1500.0, &LedModel::default(), 22);
    let mut cfg = PipelineConfig::new(5000.0);
    // a tiny budget so some packets overrun
    cfg.budget_us = 20;
    let rep = decode(&sim, &cfg, &text);
    let over = rep
        .timing
        .iter()
        .filter(|t| t.elapsed > Duration::from_micros(20))
        .count();
    assert_eq!(rep.budget_violations, over);
    assert_eq!(rep.rois.len(), rep.timing.len());
    let last = sim.events.last().unwrap().t;
    assert_eq!(
        rep.timing.len() as u64,
        last / cfg.window_us - sim.events[0].t / cfg.window_us + 1
    );
    let mut csv = Vec::new();
    rep.write_timing_csv(&mut csv).unwrap();
    let over_col = String::from_utf8(csv)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.ends_with(",1"))
        .count();
    assert_eq!(over_col, over);
}

#[test]
fn concurrent_matches_single_threaded() {
    let text = sample_text(23, 12);
    let sim = scene(&text, 5000.0, 3000.0, &LedModel::default(), 23);
    let single = decode(&sim, &PipelineConfig::new(5000.0), &text);
    let cfg = PipelineConfig {
        concurrent: true,
        ..PipelineConfig::new(5000.0)
    };
    let threaded = decode(&sim, &cfg, &text);
    assert_eq!(single.decoded, threaded.decoded);
    assert_eq!(single.trace.len(), threaded.trace.len());
    for (a, b) in single.trace.iter().zip(&threaded.trace) {
        assert_eq!((a.t, a.x, a.y, a.theta), (b.t, b.x, b.y, b.theta));
    }
    assert_eq!(threaded.ring_overflow, 0);
}

#[test]
fn ekf_overruns_budget_at_high_event_load() {
    // 10 kHz carrier with a bright LED: thousands of events per packet
    let text = sample_text(24, 20);
    let led = LedModel {
        events_per_edge: 200.0,
        ..LedModel::default()
    };
    let sim = scene(&text, 10_000.0, 3000.0, &led, 24);
    let ukf = decode(&sim, &PipelineConfig::new(10_000.0), &text);
    let ekf_cfg = PipelineConfig {
        tracker: TrackerKind::Ekf,
        ..PipelineConfig::new(10_000.0)
    };
    let ekf = decode(&sim, &ekf_cfg, &text);
    assert_eq!(persistent_violations(&sim, &PipelineConfig::new(10_000.0)), 0);
    assert!(ekf.budget_violations > 0, "ekf {:?}", ekf.timing_summary());
    assert!(ekf.timing_summary().mean_us > 5.0 * ukf.timing_summary().mean_us);
}

#[test]
fn lost_track_is_reacquired() {
    // the LED stays dark for well over the loss window in the middle of the message
    let led = LedModel {
        noise_rate: 0.0,
        ..LedModel::default()
    };
    let a = scene(b"first", 5000.0, 0.0, &led, 25);
    let b = scene(b"second", 5000.0, 0.0, &led, 26);
    let offset = a.events.last().unwrap().t + 400_000;
    let mut events = a.events.clone();
    events.extend(b.events.iter().map(|e| blinklink::Event { t: e.t + offset, ..*e }));
    let rep = run(&events, &PipelineConfig::new(5000.0), None, None).unwrap();
    assert_eq!(rep.acquisitions, 2);
    assert_eq!(rep.losses, 1);
}
