//! End-to-end processing: grid filter, tracker, ROI gating, decoder.
//!
//! Stage 1 (filter + tracker + gate) runs once per window and is the part
//! that is timed against the budget. Stage 2 collects the gated events and
//! decodes them once the stream ends; it sits on the consumer side of a
//! single-producer/single-consumer buffer and is not timed.
//!
//! Per window, stage 1:
//! 1. grid-filters the packet;
//! 2. without a track, tries to seed one from the whole filtered packet;
//! 3. with a track, gates the filtered packet by the ROI predicted from the
//!    previous belief and steps the tracker on what survives;
//! 4. gates the filtered packet again with the posterior ROI and forwards the
//!    survivors to stage 2.
//!
//! A track that goes `loss_windows` windows without a measurement is dropped
//! and re-acquired from the full frame.
//!
//! The ROI is the Mahalanobis ellipse of the blob covariance plus the
//! position uncertainty, scaled by `k_roi`, with its centre moved along the
//! tracked velocity to each event's timestamp.
//!
//! Timing scope: measured around steps 1 to 4 for each packet. Buffer
//! sizing: `ring_capacity` packets between the stages (default 64, about a
//! quarter second of 4 ms windows).

pub mod config;
pub mod sweep;

use std::io::{self, Write};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::ekf_baseline::{ekf_step, EkfParams, EkfState};
use crate::events::ring::{ring_buffer, DEFAULT_CAPACITY};
use crate::events::{Event, EventError, EventPacket, Packetizer, SensorSize, DEFAULT_WINDOW_US};
use crate::gaukf::{make_measurement, step, FilterBelief, UkfError, UkfParams};
use crate::geometry::Spd2;
use crate::modem::{decode_events, word_accuracy, Accuracy, Decoded, DecoderConfig, ModemError};
use crate::simulate::{truth_position, TruthSample};
use crate::spatial_filter::{FilterError, GridFilter, GridFilterConfig};

pub use config::{ConfigError, KvConfig};

pub const DEFAULT_K_ROI: f64 = 3.0;
pub const DEFAULT_LOSS_WINDOWS: u32 = 50;
/// Windows after an acquisition left out of the RMS error.
pub const SETTLE_WINDOWS: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Tracker(#[from] UkfError),
    #[error(transparent)]
    Modem(#[from] ModemError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackerKind {
    GaUkf,
    Ekf,
}

impl TrackerKind {
    pub fn name(self) -> &'static str {
        match self {
            TrackerKind::GaUkf => "gaukf",
            TrackerKind::Ekf => "ekf",
        }
    }
}

impl std::str::FromStr for TrackerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaukf" => Ok(TrackerKind::GaUkf),
            "ekf" => Ok(TrackerKind::Ekf),
            other => Err(format!("unknown tracker `{other}` (expected gaukf or ekf)")),
        }
    }
}

/// Elliptical gate with a moving centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    /// Centre at `t`.
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    /// Blob covariance plus position uncertainty, px².
    pub cov: Spd2<f64>,
    pub k: f64,
    /// Validity time, µs.
    pub t: u64,
}

impl Roi {
    pub fn center_at(&self, t: u64) -> [f64; 2] {
        let dt = (t as f64 - self.t as f64) * 1e-6;
        [
            self.center[0] + self.velocity[0] * dt,
            self.center[1] + self.velocity[1] * dt,
        ]
    }

    /// Closed boundary: distance exactly `k` is inside.
    pub fn contains(&self, e: &Event) -> bool {
        let c = self.center_at(e.t);
        let d2 = self.cov.mahalanobis_sq(e.x as f64 - c[0], e.y as f64 - c[1]);
        d2 <= self.k * self.k
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.k * self.k * self.cov.det().sqrt()
    }
}

/// Events of `packet` inside `roi`, order preserved.
pub fn roi_gate(packet: &EventPacket, roi: &Roi) -> EventPacket {
    packet.with_events(packet.events.iter().filter(|e| roi.contains(e)).copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window_us: u64,
    pub tracker: TrackerKind,
    pub k_roi: f64,
    /// Per-packet processing budget; at most `window_us`, since a slower
    /// stage 1 lets new data arrive before the previous packet is done.
    pub budget_us: u64,
    pub loss_windows: u32,
    pub sensor: SensorSize,
    pub filter: GridFilterConfig,
    pub ukf: UkfParams<f64>,
    pub ekf: EkfParams<f64>,
    pub decoder: DecoderConfig,
    /// Run the decoder on its own thread.
    pub concurrent: bool,
    /// Pace ingestion at wall-clock speed; the inter-stage buffer then drops
    /// its oldest packet when full instead of blocking.
    pub realtime: bool,
    pub ring_capacity: usize,
}

impl PipelineConfig {
    pub fn new(carrier_hz: f64) -> Self {
        Self {
            window_us: DEFAULT_WINDOW_US,
            tracker: TrackerKind::GaUkf,
            k_roi: DEFAULT_K_ROI,
            budget_us: DEFAULT_WINDOW_US,
            loss_windows: DEFAULT_LOSS_WINDOWS,
            sensor: SensorSize::HD,
            filter: GridFilterConfig::default(),
            ukf: UkfParams::default(),
            ekf: EkfParams::default(),
            decoder: DecoderConfig::new(carrier_hz),
            concurrent: false,
            realtime: false,
            ring_capacity: DEFAULT_CAPACITY,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()).into());
        if self.window_us == 0 {
            return bad("window_us must be positive");
        }
        if self.budget_us == 0 || self.budget_us > self.window_us {
            return bad("budget_us must lie in (0, window_us]");
        }
        if !(self.k_roi > 0.0 && self.k_roi.is_finite()) {
            return bad("k_roi must be positive");
        }
        if self.loss_windows == 0 {
            return bad("loss_windows must be positive");
        }
        if self.ring_capacity == 0 {
            return bad("ring_capacity must be positive");
        }
        if !(self.ekf.forgetting > 0.0 && self.ekf.forgetting < 1.0) {
            return bad("ekf.forgetting must lie in (0, 1)");
        }
        GridFilter::new(self.sensor, self.filter)?;
        self.ukf.validate()?;
        self.decoder.validate()?;
        Ok(())
    }

    /// Applies every recognised `pipeline.*`, `sensor.*`, `filter.*`,
    /// `ukf.*`, `ekf.*` and `modem.*` key, leaving the rest in `kv`.
    pub fn apply(&mut self, kv: &mut KvConfig) -> Result<(), ConfigError> {
        kv.take_into("pipeline.window_us", &mut self.window_us)?;
        if let Some(t) = kv.take::<String>("pipeline.tracker")? {
            self.tracker = t.parse().map_err(|_| ConfigError::Value {
                key: "pipeline.tracker".into(),
                value: t,
            })?;
        }
        kv.take_into("pipeline.k_roi", &mut self.k_roi)?;
        kv.take_into("pipeline.budget_us", &mut self.budget_us)?;
        kv.take_into("pipeline.loss_windows", &mut self.loss_windows)?;
        kv.take_into("pipeline.concurrent", &mut self.concurrent)?;
        kv.take_into("pipeline.realtime", &mut self.realtime)?;
        kv.take_into("pipeline.ring_capacity", &mut self.ring_capacity)?;
        kv.take_into("sensor.width", &mut self.sensor.width)?;
        kv.take_into("sensor.height", &mut self.sensor.height)?;
        kv.take_into("filter.cell_size", &mut self.filter.cell_size)?;
        kv.take_into("filter.activity_threshold", &mut self.filter.activity_threshold)?;

        let u = &mut self.ukf;
        kv.take_into("ukf.alpha", &mut u.alpha)?;
        kv.take_into("ukf.beta", &mut u.beta_ukf)?;
        kv.take_into("ukf.kappa", &mut u.kappa)?;
        kv.take_into("ukf.beta_decay", &mut u.beta_decay)?;
        kv.take_into("ukf.sigma_min", &mut u.sigma_min)?;
        kv.take_into("ukf.n_min", &mut u.n_min)?;
        kv.take_into("ukf.delta_clamp", &mut u.delta_clamp)?;
        for (prefix, m) in [("ukf.q_", &mut u.q), ("ukf.p0_", &mut u.initial_cov)] {
            for (name, idx) in [
                ("position", &[0usize, 1][..]),
                ("velocity", &[2, 3]),
                ("log_axes", &[4, 5]),
                ("theta", &[6]),
                ("omega", &[7]),
            ] {
                if let Some(v) = kv.take::<f64>(&format!("{prefix}{name}"))? {
                    idx.iter().for_each(|&i| m[(i, i)] = v);
                }
            }
        }
        for (name, idx) in [("position", &[0usize, 1][..]), ("log_axes", &[2, 3]), ("theta", &[4])] {
            if let Some(v) = kv.take::<f64>(&format!("ukf.r_{name}"))? {
                idx.iter().for_each(|&i| u.r[(i, i)] = v);
            }
        }

        let e = &mut self.ekf;
        kv.take_into("ekf.forgetting", &mut e.forgetting)?;
        kv.take_into("ekf.position_noise", &mut e.position_noise)?;
        kv.take_into("ekf.shape_noise_theta", &mut e.shape_noise[0])?;
        if let Some(v) = kv.take::<f64>("ekf.shape_noise_axes")? {
            e.shape_noise[1] = v;
            e.shape_noise[2] = v;
        }
        for (prefix, m) in [("ekf.q_", &mut e.q), ("ekf.p0_", &mut e.initial_cov)] {
            for (name, idx) in [
                ("position", &[0usize, 1][..]),
                ("velocity", &[2, 3]),
                ("theta", &[4]),
                ("rate", &[5]),
                ("axes", &[6, 7]),
            ] {
                if let Some(v) = kv.take::<f64>(&format!("{prefix}{name}"))? {
                    idx.iter().for_each(|&i| m[(i, i)] = v);
                }
            }
        }

        let d = &mut self.decoder;
        kv.take_into("modem.carrier_hz", &mut d.carrier_hz)?;
        if let Some(tau) = kv.take::<f64>("modem.decay_tau")? {
            d.decay_tau = Some(tau);
        }
        kv.take_into("modem.theta_hi", &mut d.theta_hi)?;
        kv.take_into("modem.theta_lo", &mut d.theta_lo)?;
        kv.take_into("modem.auto_threshold", &mut d.auto_threshold)?;
        Ok(())
    }
}

/// Tracker state at the end of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
    pub omega: f64,
    /// EKF only: cumulative axis clamps.
    pub clamped: Option<u64>,
    /// A measurement was fused in this window.
    pub measured: bool,
    /// Events handed to the tracker.
    pub events: usize,
    pub step: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketTiming {
    pub t_start: u64,
    pub events_in: usize,
    pub events_filtered: usize,
    pub events_gated: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
enum Tracker {
    Ukf(FilterBelief<f64>),
    Ekf(EkfState<f64>),
}

impl Tracker {
    fn t(&self) -> u64 {
        match self {
            Tracker::Ukf(b) => b.t,
            Tracker::Ekf(s) => s.t,
        }
    }

    /// Linear prediction of the ROI to time `t`.
    fn roi(&self, t: u64, k: f64, q_pos: f64) -> Roi {
        let (pos, vel, shape, cov) = match self {
            Tracker::Ukf(b) => ([b.mean.x, b.mean.y], [b.mean.vx, b.mean.vy], b.shape(), &b.cov),
            Tracker::Ekf(s) => ([s.x, s.y], [s.vx, s.vy], s.shape(), &s.cov),
        };
        let dt = (t as f64 - self.t() as f64) * 1e-6;
        // position block of F P Fᵀ with F = [[I, dt I], [0, I]], plus Q dt
        let p =
            |i: usize, j: usize| cov[(i, j)] + dt * (cov[(i, j + 2)] + cov[(i + 2, j)]) + dt * dt * cov[(i + 2, j + 2)];
        let grow = q_pos * dt.abs();
        Roi {
            center: [pos[0] + vel[0] * dt, pos[1] + vel[1] * dt],
            velocity: vel,
            cov: Spd2 {
                a: shape.a + p(0, 0) + grow,
                b: shape.b + p(0, 1),
                c: shape.c + p(1, 1) + grow,
            },
            k,
            t,
        }
    }

    fn row(&self, step: Duration, measured: bool, events: usize) -> TraceRow {
        match self {
            Tracker::Ukf(b) => TraceRow {
                t: b.t,
                x: b.mean.x,
                y: b.mean.y,
                vx: b.mean.vx,
                vy: b.mean.vy,
                lambda1: b.mean.lambda1(),
                lambda2: b.mean.lambda2(),
                theta: b.mean.theta,
                omega: b.mean.omega,
                clamped: None,
                measured,
                events,
                step,
            },
            Tracker::Ekf(s) => TraceRow {
                t: s.t,
                x: s.x,
                y: s.y,
                vx: s.vx,
                vy: s.vy,
                lambda1: s.lambda1,
                lambda2: s.lambda2,
                theta: s.theta,
                omega: s.q_rate,
                clamped: Some(s.clamped),
                measured,
                events,
                step,
            },
        }
    }
}

/// Output of stage 1 for one window.
#[derive(Debug, Clone)]
pub struct WindowOutput {
    /// Events forwarded to the decoder.
    pub gated: EventPacket,
    pub timing: PacketTiming,
    /// Tracker state after the window, if a track exists.
    pub trace: Option<TraceRow>,
    /// Posterior ROI used for `gated`.
    pub roi: Option<Roi>,
    /// Set on the window a track was seeded.
    pub acquired: bool,
}

/// Filter + tracker + gate, one window at a time.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    cfg: PipelineConfig,
    grid: GridFilter,
    tracker: Option<Tracker>,
    misses: u32,
    losses: u32,
    acquisitions: u32,
}

impl FrontEnd {
    pub fn new(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            grid: GridFilter::new(cfg.sensor, cfg.filter)?,
            cfg: cfg.clone(),
            tracker: None,
            misses: 0,
            losses: 0,
            acquisitions: 0,
        })
    }

    pub fn is_tracking(&self) -> bool {
        self.tracker.is_some()
    }

    pub fn losses(&self) -> u32 {
        self.losses
    }

    pub fn acquisitions(&self) -> u32 {
        self.acquisitions
    }

    fn q_pos(&self) -> f64 {
        match self.cfg.tracker {
            TrackerKind::GaUkf => self.cfg.ukf.q[(0, 0)],
            TrackerKind::Ekf => self.cfg.ekf.q[(0, 0)],
        }
    }

    pub fn process(&mut self, packet: &EventPacket) -> Result<WindowOutput, PipelineError> {
        let started = Instant::now();
        let filtered = self.grid.filter_packet(packet);
        let k = self.cfg.k_roi;
        let q_pos = self.q_pos();
        let mut step_time = Duration::ZERO;
        let mut acquired = false;
        let mut measured = false;
        let mut tracked_events = 0;

        match self.tracker.take() {
            None => {
                if let Some(z) = make_measurement(&filtered, packet.t_end, &self.cfg.ukf) {
                    self.tracker = Some(match self.cfg.tracker {
                        TrackerKind::GaUkf => Tracker::Ukf(FilterBelief::initialize(&z, packet.t_end, &self.cfg.ukf)),
                        TrackerKind::Ekf => Tracker::Ekf(EkfState::initialize(&z, packet.t_end, &self.cfg.ekf)),
                    });
                    self.misses = 0;
                    self.acquisitions += 1;
                    acquired = true;
                    measured = true;
                    tracked_events = filtered.len();
                }
            }
            Some(tr) => {
                let mid = packet.t_start + (packet.t_end - packet.t_start) / 2;
                let prior = tr.roi(mid.max(tr.t()), k, q_pos);
                let input = roi_gate(&filtered, &prior);
                measured = input.len() >= self.cfg.ukf.n_min.max(1);
                tracked_events = input.len();
                let next = match tr {
                    Tracker::Ukf(b) => {
                        let out = step(&b, &input, &self.cfg.ukf)?;
                        step_time = out.elapsed;
                        Tracker::Ukf(out.belief)
                    }
                    Tracker::Ekf(s) => {
                        let out = ekf_step(&s, &input, &self.cfg.ekf)?;
                        step_time = out.elapsed;
                        Tracker::Ekf(out.state)
                    }
                };
                self.misses = if measured { 0 } else { self.misses + 1 };
                if self.misses >= self.cfg.loss_windows {
                    self.losses += 1;
                    self.misses = 0;
                } else {
                    self.tracker = Some(next);
                }
            }
        }

        let roi = self.tracker.as_ref().map(|tr| tr.roi(tr.t(), k, q_pos));
        let gated = match &roi {
            Some(r) => roi_gate(&filtered, r),
            None => packet.with_events(Vec::new()),
        };
        let elapsed = started.elapsed();
        Ok(WindowOutput {
            timing: PacketTiming {
                t_start: packet.t_start,
                events_in: packet.len(),
                events_filtered: filtered.len(),
                events_gated: gated.len(),
                elapsed,
            },
            trace: self
                .tracker
                .as_ref()
                .map(|tr| tr.row(step_time, measured, tracked_events)),
            roi,
            acquired,
            gated,
        })
    }
}

/// Stage 2: ordered collection of gated events, decoded at the end.
#[derive(Debug, Clone, Default)]
pub struct BackEnd {
    events: Vec<Event>,
    last_t: Option<u64>,
    causality_violations: u64,
}

impl BackEnd {
    pub fn consume(&mut self, packet: &EventPacket) {
        for e in &packet.events {
            if self.last_t.is_some_and(|t| e.t < t) {
                self.causality_violations += 1;
                continue;
            }
            self.last_t = Some(e.t);
            self.events.push(*e);
        }
    }

    pub fn causality_violations(&self) -> u64 {
        self.causality_violations
    }

    pub fn finish(self, cfg: &DecoderConfig) -> Result<(Decoded, u64), ModemError> {
        Ok((decode_events(&self.events, cfg)?, self.causality_violations))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingSummary {
    pub mean_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl TimingSummary {
    pub fn from_durations(d: impl IntoIterator<Item = Duration>) -> Self {
        let mut v: Vec<f64> = d.into_iter().map(|d| d.as_secs_f64() * 1e6).collect();
        if v.is_empty() {
            return Self {
                mean_us: 0.0,
                p99_us: 0.0,
                max_us: 0.0,
            };
        }
        v.sort_by(f64::total_cmp);
        let idx = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        Self {
            mean_us: v.iter().sum::<f64>() / v.len() as f64,
            p99_us: v[idx],
            max_us: v[v.len() - 1],
        }
    }
}

/// Everything a run produces.
///
/// Timing covers grid filter, tracker step and both ROI gates for each
/// window, from receipt of the packet to hand-off of the gated events. It
/// excludes packetization, the inter-stage buffer and decoding.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub tracker: TrackerKind,
    pub decoded: Decoded,
    pub accuracy: Option<Accuracy>,
    pub reference: Option<Vec<u8>>,
    /// One entry per packet.
    pub timing: Vec<PacketTiming>,
    /// One entry per packet with a live track.
    pub trace: Vec<TraceRow>,
    pub rois: Vec<Option<Roi>>,
    pub budget_us: u64,
    pub budget_violations: usize,
    pub rms_error: Option<f64>,
    pub mean_speed: Option<f64>,
    pub acquisitions: u32,
    pub losses: u32,
    pub ring_overflow: u64,
    pub causality_violations: u64,
}

impl RunReport {
    pub fn timing_summary(&self) -> TimingSummary {
        TimingSummary::from_durations(self.timing.iter().map(|t| t.elapsed))
    }

    /// `packet,t_start_us,events_in,events_filtered,events_gated,step_us,over_budget`
    pub fn write_timing_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "packet,t_start_us,events_in,events_filtered,events_gated,step_us,over_budget"
        )?;
        for (i, t) in self.timing.iter().enumerate() {
            let us = t.elapsed.as_secs_f64() * 1e6;
            writeln!(
                w,
                "{i},{},{},{},{},{us:.3},{}",
                t.t_start,
                t.events_in,
                t.events_filtered,
                t.events_gated,
                u8::from(t.elapsed > Duration::from_micros(self.budget_us))
            )?;
        }
        Ok(())
    }

    /// `t_us,x,y,vx,vy,l1,l2,theta,omega,step_us`, plus `clamped` for the EKF.
    pub fn write_trace_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let ekf = self.tracker == TrackerKind::Ekf;
        write!(w, "t_us,x,y,vx,vy,l1,l2,theta,omega,step_us")?;
        writeln!(w, "{}", if ekf { ",clamped" } else { "" })?;
        for r in &self.trace {
            write!(
                w,
                "{},{:.4},{:.4},{:.3},{:.3},{:.4},{:.4},{:.6},{:.5},{:.3}",
                r.t,
                r.x,
                r.y,
                r.vx,
                r.vy,
                r.lambda1,
                r.lambda2,
                r.theta,
                r.omega,
                r.step.as_secs_f64() * 1e6
            )?;
            match r.clamped {
                Some(c) if ekf => writeln!(w, ",{c}")?,
                _ => writeln!(w)?,
            }
        }
        Ok(())
    }

    /// `index,reference,decoded,correct`: one row per reference word;
    /// `decoded` is the word at the same position in the output, `correct`
    /// whether the reference word is part of the longest common word
    /// subsequence.
    pub fn write_words_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "index,reference,decoded,correct")?;
        let Some(reference) = &self.reference else {
            return Ok(());
        };
        let split = |s: &[u8]| -> Vec<Vec<u8>> {
            s.split(|b| b.is_ascii_whitespace())
                .filter(|w| !w.is_empty())
                .map(<[u8]>::to_vec)
                .collect()
        };
        let (rw, dw) = (split(reference), split(&self.decoded.bytes));
        let matched = lcs_mask(&rw, &dw);
        for (i, word) in rw.iter().enumerate() {
            let dec = dw.get(i).map(|d| csv_field(d)).unwrap_or_default();
            writeln!(w, "{i},{},{dec},{}", csv_field(word), u8::from(matched[i]))?;
        }
        Ok(())
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let t = self.timing_summary();
        let mut s = format!(
            "tracker: {}\npackets: {}\nacquisitions: {}, losses: {}\ndecoded bytes: {}\n",
            self.tracker.name(),
            self.timing.len(),
            self.acquisitions,
            self.losses,
            self.decoded.bytes.len()
        );
        if let Some(a) = &self.accuracy {
            s += &format!(
                "word accuracy: {:.4} ({}/{})\ncharacter accuracy: {:.4}\n",
                a.word, a.words_matched, a.words_total, a.character
            );
        }
        s += &format!(
            "timing us: mean {:.1}, p99 {:.1}, max {:.1}\nbudget violations: {} (budget {} us)\n",
            t.mean_us, t.p99_us, t.max_us, self.budget_violations, self.budget_us
        );
        if let Some(e) = self.rms_error {
            s += &format!("rms position error: {e:.3} px\n");
        }
        if let Some(v) = self.mean_speed {
            s += &format!("mean pixel speed: {v:.1} px/s\n");
        }
        if self.ring_overflow > 0 {
            s += &format!("buffer overflow: {} packets dropped\n", self.ring_overflow);
        }
        s
    }
}

fn csv_field(w: &[u8]) -> String {
    let s = String::from_utf8_lossy(w);
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.into_owned()
    }
}

/// Which items of `a` belong to one longest common subsequence with `b`.
fn lcs_mask<T: PartialEq>(a: &[T], b: &[T]) -> Vec<bool> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[at(i, j)] = if a[i] == b[j] {
                table[at(i + 1, j + 1)] + 1
            } else {
                table[at(i + 1, j)].max(table[at(i, j + 1)])
            };
        }
    }
    let mut mask = vec![false; n];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            mask[i] = true;
            i += 1;
            j += 1;
        } else if table[at(i + 1, j)] >= table[at(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    mask
}

struct Collected {
    timing: Vec<PacketTiming>,
    trace: Vec<TraceRow>,
    rois: Vec<Option<Roi>>,
    acquired_at: Vec<usize>,
}

fn front_loop(
    events: &[Event],
    cfg: &PipelineConfig,
    mut sink: impl FnMut(EventPacket),
) -> Result<(Collected, FrontEnd), PipelineError> {
    let mut fe = FrontEnd::new(cfg)?;
    let mut pk = Packetizer::new(cfg.window_us)?;
    let mut col = Collected {
        timing: Vec::new(),
        trace: Vec::new(),
        rois: Vec::new(),
        acquired_at: Vec::new(),
    };
    let wall = Instant::now();
    let first_t = events.first().map_or(0, |e| e.t);
    let mut pending = Vec::new();
    let mut handle = |p: EventPacket, fe: &mut FrontEnd, col: &mut Collected| -> Result<(), PipelineError> {
        if cfg.realtime {
            let due = Duration::from_micros(p.t_end.saturating_sub(first_t));
            if let Some(wait) = due.checked_sub(wall.elapsed()) {
                thread::sleep(wait);
            }
        }
        let out = fe.process(&p)?;
        if out.acquired {
            col.acquired_at.push(col.timing.len());
        }
        col.timing.push(out.timing);
        col.rois.push(out.roi);
        col.trace.extend(out.trace);
        sink(out.gated);
        Ok(())
    };
    for e in events {
        pk.push(*e, &mut pending)?;
        for p in pending.drain(..) {
            handle(p, &mut fe, &mut col)?;
        }
    }
    if let Some(p) = pk.finish() {
        handle(p, &mut fe, &mut col)?;
    }
    Ok((col, fe))
}

/// Runs the whole chain over a time-sorted event stream.
pub fn run(
    events: &[Event],
    cfg: &PipelineConfig,
    truth: Option<&[TruthSample]>,
    reference: Option<&[u8]>,
) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let (col, fe, decoded, causality, overflow) = if cfg.concurrent {
        let (mut tx, mut rx) = ring_buffer::<EventPacket>(cfg.ring_capacity);
        let realtime = cfg.realtime;
        thread::scope(|s| {
            let consumer = s.spawn(move || {
                let mut back = BackEnd::default();
                loop {
                    match rx.pop() {
                        Some(p) => back.consume(&p),
                        None if rx.is_abandoned() => {
                            while let Some(p) = rx.pop() {
                                back.consume(&p);
                            }
                            break;
                        }
                        None => thread::yield_now(),
                    }
                }
                back
            });
            let front = front_loop(events, cfg, |p| {
                if realtime {
                    tx.push(p);
                } else {
                    let mut item = p;
                    while let Err(back) = tx.try_push(item) {
                        item = back;
                        thread::yield_now();
                    }
                }
            });
            let overflow = tx.stats().overflow;
            drop(tx);
            let back = consumer.join().expect("decoder thread panicked");
            let (col, fe) = front?;
            let (decoded, causality) = back.finish(&cfg.decoder)?;
            Ok::<_, PipelineError>((col, fe, decoded, causality, overflow))
        })?
    } else {
        let mut back = BackEnd::default();
        let (col, fe) = front_loop(events, cfg, |p| back.consume(&p))?;
        let (decoded, causality) = back.finish(&cfg.decoder)?;
        (col, fe, decoded, causality, 0)
    };

    let budget = Duration::from_micros(cfg.budget_us);
    let budget_violations = col.timing.iter().filter(|t| t.elapsed > budget).count();
    let (rms_error, mean_speed) = match truth {
        Some(gt) => truth_metrics(&col, gt),
        None => (None, None),
    };
    Ok(RunReport {
        tracker: cfg.tracker,
        accuracy: reference.map(|r| word_accuracy(&decoded.bytes, r)),
        reference: reference.map(<[u8]>::to_vec),
        decoded,
        budget_us: cfg.budget_us,
        budget_violations,
        rms_error,
        mean_speed,
        acquisitions: fe.acquisitions(),
        losses: fe.losses(),
        ring_overflow: overflow,
        causality_violations: causality,
        timing: col.timing,
        trace: col.trace,
        rois: col.rois,
    })
}

fn truth_metrics(col: &Collected, gt: &[TruthSample]) -> (Option<f64>, Option<f64>) {
    let speeds: Vec<f64> = gt
        .windows(2)
        .map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y) / ((w[1].t - w[0].t) as f64 * 1e-6))
        .collect();
    let mean_speed = (!speeds.is_empty()).then(|| speeds.iter().sum::<f64>() / speeds.len() as f64);

    // windows with a fused measurement, skipping the settling windows after
    // each acquisition; coasting windows are left out
    let mut settle_until = 0usize;
    let mut acq = col.acquired_at.iter().peekable();
    let mut trace = col.trace.iter();
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, roi) in col.rois.iter().enumerate() {
        if acq.peek() == Some(&&i) {
            acq.next();
            settle_until = i + SETTLE_WINDOWS;
        }
        if roi.is_none() {
            continue;
        }
        let Some(row) = trace.next() else { break };
        if i < settle_until || !row.measured {
            continue;
        }
        if let Some(p) = truth_position(gt, row.t) {
            sum += (row.x - p[0]).powi(2) + (row.y - p[1]).powi(2);
            n += 1;
        }
    }
    ((n > 0).then(|| (sum / n as f64).sqrt()), mean_speed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;

    fn roi() -> Roi {
        Roi {
            center: [100.0, 100.0],
            velocity: [0.0, 0.0],
            cov: Spd2 {
                a: 16.0,
                b: 0.0,
                c: 4.0,
            },
            k: 3.0,
            t: 0,
        }
    }

    #[test]
    fn gate_examples() {
        let r = roi();
        let ev = |x, y| Event::new(0, x, y, Polarity::On);
        assert!(r.contains(&ev(100, 100)));
        assert!(!r.contains(&ev(140, 100)));
        // boundary points: 3 sigma along each axis
        assert!(r.contains(&ev(112, 100)) && r.contains(&ev(88, 100)));
        assert!(r.contains(&ev(100, 106)) && r.contains(&ev(100, 94)));
        assert!(!r.contains(&ev(113, 100)));
        let pkt = EventPacket::new(0, 4000, vec![ev(140, 100), ev(100, 100), ev(101, 101)]);
        assert_eq!(roi_gate(&pkt, &r).events, vec![ev(100, 100), ev(101, 101)]);
        assert!(r.area() > 0.0);
    }

    #[test]
    fn gate_follows_velocity() {
        let r = Roi {
            velocity: [1000.0, 0.0],
            ..roi()
        };
        assert!(r.contains(&Event::new(10_000, 110, 100, Polarity::On)));
        assert!(!r.contains(&Event::new(0, 115, 100, Polarity::On)));
    }

    #[test]
    fn timing_summary_percentiles() {
        let d = (1..=100).map(Duration::from_micros);
        let s = TimingSummary::from_durations(d);
        assert_eq!(s.max_us, 100.0);
        assert_eq!(s.p99_us, 99.0);
        assert!((s.mean_us - 50.5).abs() < 1e-9);
    }

    #[test]
    fn lcs_mask_marks_common_words() {
        let a = ["a", "b", "c", "d"];
        let b = ["a", "x", "c", "d"];
        assert_eq!(lcs_mask(&a, &b), vec![true, false, true, true]);
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = PipelineConfig::new(5000.0);
        let mut kv = KvConfig::parse(
            "pipeline.tracker = ekf\npipeline.k_roi = 2.5\nukf.q_velocity = 400\nmodem.auto_threshold = true\nled.noise_rate = 1",
        )
        .unwrap();
        cfg.apply(&mut kv).unwrap();
        assert_eq!(cfg.tracker, TrackerKind::Ekf);
        assert_eq!(cfg.k_roi, 2.5);
        assert_eq!(cfg.ukf.q[(2, 2)], 400.0);
        assert_eq!(cfg.ukf.q[(3, 3)], 400.0);
        assert!(cfg.decoder.auto_threshold);
        assert!(matches!(kv.finish(), Err(ConfigError::Unknown(k)) if k == vec!["led.noise_rate".to_string()]));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = PipelineConfig::new(5000.0);
        cfg.budget_us = cfg.window_us + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::new(5000.0);
        cfg.k_roi = 0.0;
        assert!(cfg.validate().is_err());
        assert!(PipelineConfig::new(50.0).validate().is_err());
    }
}
