//! Self-generated workloads: tracker timing against carrier frequency and
//! decoding accuracy against pixel speed.

use std::io::{self, Write};
use std::time::Duration;

use crate::events::SensorSize;
use crate::modem::encode;
use crate::simulate::{sample_text, simulate, LedModel, SimError, Trajectory, TrajectoryKind};

use super::{run, PipelineConfig, PipelineError, TimingSummary, TrackerKind};

pub const BENCH_CARRIERS: [f64; 4] = [1000.0, 2500.0, 5000.0, 10_000.0];
pub const REPORT_SPEEDS: [f64; 5] = [1500.0, 3000.0, 4500.0, 6000.0, 12_000.0];
pub const REPORT_CARRIERS: [f64; 3] = [1000.0, 5000.0, 10_000.0];
pub const CIRCLE_DIAMETER_PX: f64 = 610.0;
/// Idle time before the first edge and after the last one, µs.
pub const LEAD_IN_US: u64 = 2000;
pub const TAIL_US: u64 = 20_000;

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Modem(#[from] crate::modem::ModemError),
}

/// Circular path centred on the sensor, rim moving at `speed_px_s`
/// (stationary at the centre for speed 0).
pub fn circle(speed_px_s: f64, sensor: SensorSize, duration_us: u64) -> Result<Trajectory, SimError> {
    let center = [sensor.width as f64 / 2.0, sensor.height as f64 / 2.0];
    if speed_px_s == 0.0 {
        Trajectory::new(TrajectoryKind::Stationary { pos: center }, sensor, duration_us)
    } else {
        Trajectory::circular_with_speed(center, CIRCLE_DIAMETER_PX, speed_px_s, sensor, duration_us)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub carriers: Vec<f64>,
    pub trackers: Vec<TrackerKind>,
    pub speed_px_s: f64,
    /// Transmission length per workload, µs.
    pub duration_us: u64,
    /// Each workload is run this many times; per packet the fastest run counts.
    pub repeats: usize,
    pub seed: u64,
    pub led: LedModel,
    pub base: PipelineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            carriers: BENCH_CARRIERS.to_vec(),
            trackers: vec![TrackerKind::GaUkf, TrackerKind::Ekf],
            speed_px_s: 3000.0,
            duration_us: 400_000,
            repeats: 3,
            seed: 7,
            led: LedModel::default(),
            base: PipelineConfig::new(5000.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub freq_hz: f64,
    pub tracker: TrackerKind,
    pub timing: TimingSummary,
    pub events_per_packet: f64,
    /// Per packet: (events handed to the tracker, step time µs).
    pub samples: Vec<(usize, f64)>,
}

/// Tracker step time per packet for every carrier and tracker.
///
/// Only the tracker step is timed here (weighted moments plus filter update
/// for the GA-UKF, the per-event loop for the EKF); grid filter and gating
/// are common to both and left out.
pub fn bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>, SweepError> {
    let mut rows = Vec::new();
    for &f in &cfg.carriers {
        let chars = ((cfg.duration_us as f64 * 1e-6 * f / 10.0).ceil() as usize).max(1);
        let mut text = sample_text(cfg.seed, chars);
        text.truncate(chars);
        let sched = encode(&text, f)?.shifted(LEAD_IN_US);
        let traj = circle(cfg.speed_px_s, cfg.base.sensor, sched.end_us + TAIL_US)?;
        let sim = simulate(&traj, &cfg.led, &sched, cfg.seed)?;
        for &tracker in &cfg.trackers {
            let mut pcfg = cfg.base.clone();
            pcfg.tracker = tracker;
            pcfg.decoder.carrier_hz = f;
            pcfg.concurrent = false;
            pcfg.realtime = false;
            let mut best: Vec<(usize, Duration)> = Vec::new();
            for rep in 0..cfg.repeats.max(1) {
                let report = run(&sim.events, &pcfg, None, None)?;
                let steps = report.trace.iter().map(|r| (r.events, r.step));
                if rep == 0 {
                    best = steps.collect();
                } else {
                    for (b, (_, d)) in best.iter_mut().zip(steps) {
                        b.1 = b.1.min(d);
                    }
                }
            }
            let timing = TimingSummary::from_durations(best.iter().map(|b| b.1));
            let events_per_packet = if best.is_empty() {
                0.0
            } else {
                best.iter().map(|b| b.0 as f64).sum::<f64>() / best.len() as f64
            };
            rows.push(BenchRow {
                freq_hz: f,
                tracker,
                timing,
                events_per_packet,
                samples: best.iter().map(|&(n, d)| (n, d.as_secs_f64() * 1e6)).collect(),
            });
        }
    }
    Ok(rows)
}

/// `freq_hz,tracker,mean_us,p99_us,max_us,events_per_packet`
pub fn write_bench_csv<W: Write>(w: &mut W, rows: &[BenchRow]) -> io::Result<()> {
    writeln!(w, "freq_hz,tracker,mean_us,p99_us,max_us,events_per_packet")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.3},{:.3},{:.3},{:.2}",
            r.freq_hz,
            r.tracker.name(),
            r.timing.mean_us,
            r.timing.p99_us,
            r.timing.max_us,
            r.events_per_packet
        )?;
    }
    Ok(())
}

/// Least-squares line `y = slope * x + intercept` and its R².
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub speeds: Vec<f64>,
    pub carriers: Vec<f64>,
    pub repeats: usize,
    pub seed: u64,
    pub n_words: usize,
    pub led: LedModel,
    pub base: PipelineConfig,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            speeds: REPORT_SPEEDS.to_vec(),
            carriers: REPORT_CARRIERS.to_vec(),
            repeats: 3,
            seed: 7,
            n_words: 60,
            led: LedModel::default(),
            base: PipelineConfig::new(5000.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyCell {
    pub speed_px_s: f64,
    pub carrier_hz: f64,
    /// Means over the repetitions.
    pub word: f64,
    pub character: f64,
}

/// Decoding accuracy over the speed x carrier grid. Repetition `r` uses
/// seed `seed + r` for both text and stream.
pub fn speed_accuracy(cfg: &ReportConfig) -> Result<Vec<AccuracyCell>, SweepError> {
    let mut cells = Vec::new();
    for &speed in &cfg.speeds {
        for &f in &cfg.carriers {
            let (mut word, mut character) = (0.0, 0.0);
            let reps = cfg.repeats.max(1);
            for r in 0..reps as u64 {
                let seed = cfg.seed + r;
                let text = sample_text(seed, cfg.n_words);
                let sched = encode(&text, f)?.shifted(LEAD_IN_US);
                let traj = circle(speed, cfg.base.sensor, sched.end_us + TAIL_US)?;
                let sim = simulate(&traj, &cfg.led, &sched, seed)?;
                let mut pcfg = cfg.base.clone();
                pcfg.decoder.carrier_hz = f;
                let acc = run(&sim.events, &pcfg, None, Some(&text))?
                    .accuracy
                    .expect("reference given");
                word += acc.word;
                character += acc.character;
            }
            cells.push(AccuracyCell {
                speed_px_s: speed,
                carrier_hz: f,
                word: word / reps as f64,
                character: character / reps as f64,
            });
        }
    }
    Ok(cells)
}

/// One row per speed, one word-accuracy column per carrier:
/// `speed_px_s,<carrier>hz,...`.
pub fn write_accuracy_grid<W: Write>(w: &mut W, cells: &[AccuracyCell]) -> io::Result<()> {
    let mut carriers: Vec<f64> = Vec::new();
    let mut speeds: Vec<f64> = Vec::new();
    for c in cells {
        if !carriers.contains(&c.carrier_hz) {
            carriers.push(c.carrier_hz);
        }
        if !speeds.contains(&c.speed_px_s) {
            speeds.push(c.speed_px_s);
        }
    }
    write!(w, "speed_px_s")?;
    for f in &carriers {
        write!(w, ",{f}hz")?;
    }
    writeln!(w)?;
    for s in &speeds {
        write!(w, "{s}")?;
        for f in &carriers {
            let cell = cells.iter().find(|c| c.speed_px_s == *s && c.carrier_hz == *f);
            match cell {
                Some(c) => write!(w, ",{:.4}", c.word)?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0 * i as f64 + 2.0)).collect();
        let (m, b, r2) = linear_fit(&pts);
        assert!((m - 3.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let noisy = [(0.0, 1.0), (1.0, 0.0), (2.0, 1.0), (3.0, 0.0)];
        assert!(linear_fit(&noisy).2 < 0.5);
    }

    #[test]
    fn grid_layout() {
        let cells: Vec<AccuracyCell> = [1500.0, 3000.0]
            .iter()
            .flat_map(|&s| {
                [1000.0, 5000.0].map(|f| AccuracyCell {
                    speed_px_s: s,
                    carrier_hz: f,
                    word: 0.5,
                    character: 0.5,
                })
            })
            .collect();
        let mut buf = Vec::new();
        write_accuracy_grid(&mut buf, &cells).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "speed_px_s,1000hz,5000hz\n1500,0.5000,0.5000\n3000,0.5000,0.5000\n"
        );
    }
}
