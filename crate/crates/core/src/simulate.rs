//! Synthetic event streams for a blinking LED moving over the sensor.
//!
//! Three sources are rendered and merged:
//! * edge bursts: at every LED edge, Poisson(`events_per_edge`) events drawn
//!   from the blob Gaussian at the true position, each delayed by an
//!   exponential latency; ON edges give positive polarity, OFF edges negative;
//! * motion events: while the LED is lit and moving, a Poisson stream at
//!   `motion_event_rate` events per pixel travelled, drawn from the blob
//!   covariance inflated along the velocity by `speed * motion_sweep_s`,
//!   positive ahead of the centre and negative behind it;
//! * background noise: uniform over the sensor at `noise_rate` events/s.
//!
//! All randomness comes from one ChaCha8 generator consumed in that order
//! (edges in schedule order, then motion slices in time order, then noise),
//! and the merged stream is stably sorted by timestamp.

use std::f64::consts::PI;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use thiserror::Error;

use crate::events::io::FormatError;
use crate::events::{Event, Polarity, SensorSize};
use crate::geometry::{canonical_orientation, cov_from_axes, Spd2};
use crate::modem::{Level, OnOffSchedule};

/// Ground-truth sampling interval, µs.
pub const TRUTH_PERIOD_US: u64 = 1000;
const MOTION_SLICE_US: u64 = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory leaves the sensor at t = {t_us}us ({x:.1}, {y:.1})")]
    OutOfBounds { t_us: u64, x: f64, y: f64 },
    #[error("t = {t_us}us outside trajectory validity [0, {duration_us}]")]
    OutOfRange { t_us: u64, duration_us: u64 },
    #[error("invalid trajectory: {0}")]
    Trajectory(&'static str),
    #[error("invalid LED model: {0}")]
    Led(&'static str),
    #[error("schedule ends at {schedule_us}us, after the trajectory ({duration_us}us)")]
    ScheduleTooLong { schedule_us: u64, duration_us: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryKind {
    Stationary {
        pos: [f64; 2],
    },
    Linear {
        start: [f64; 2],
        velocity: [f64; 2],
    },
    /// Counter-clockwise in image coordinates from `phase` (rad).
    Circular {
        center: [f64; 2],
        diameter: f64,
        angular_rate: f64,
        phase: f64,
    },
    /// Piecewise-linear through `(t_us, position)` knots, held at the ends.
    Waypoints(Vec<(u64, [f64; 2])>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    kind: TrajectoryKind,
    sensor: SensorSize,
    duration_us: u64,
}

impl Trajectory {
    pub fn new(kind: TrajectoryKind, sensor: SensorSize, duration_us: u64) -> Result<Self, SimError> {
        let finite = |v: &[f64]| v.iter().all(|c| c.is_finite());
        match &kind {
            TrajectoryKind::Stationary { pos } if !finite(pos) => {
                return Err(SimError::Trajectory("non-finite position"))
            }
            TrajectoryKind::Linear { start, velocity } if !finite(start) || !finite(velocity) => {
                return Err(SimError::Trajectory("non-finite linear parameters"))
            }
            TrajectoryKind::Circular {
                center,
                diameter,
                angular_rate,
                phase,
            } => {
                if !finite(center) || !finite(&[*diameter, *angular_rate, *phase]) {
                    return Err(SimError::Trajectory("non-finite circle parameters"));
                }
                if *diameter < 0.0 {
                    return Err(SimError::Trajectory("negative diameter"));
                }
            }
            TrajectoryKind::Waypoints(pts) => {
                if pts.is_empty() {
                    return Err(SimError::Trajectory("no waypoints"));
                }
                if pts.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(SimError::Trajectory("waypoint times must increase"));
                }
                if pts.iter().any(|(_, p)| !finite(p)) {
                    return Err(SimError::Trajectory("non-finite waypoint"));
                }
            }
            _ => {}
        }
        let traj = Self {
            kind,
            sensor,
            duration_us,
        };
        traj.check_bounds()?;
        Ok(traj)
    }

    /// Circle whose rim moves at `speed_px_s`.
    pub fn circular_with_speed(
        center: [f64; 2],
        diameter: f64,
        speed_px_s: f64,
        sensor: SensorSize,
        duration_us: u64,
    ) -> Result<Self, SimError> {
        if !(diameter > 0.0) {
            return Err(SimError::Trajectory("diameter must be positive"));
        }
        let angular_rate = 2.0 * speed_px_s / diameter;
        Self::new(
            TrajectoryKind::Circular {
                center,
                diameter,
                angular_rate,
                phase: 0.0,
            },
            sensor,
            duration_us,
        )
    }

    fn check_bounds(&self) -> Result<(), SimError> {
        let (w, h) = (self.sensor.width as f64, self.sensor.height as f64);
        let inside = |p: [f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w - 1.0 && p[1] <= h - 1.0;
        let mut t = 0;
        loop {
            let p = self.eval(t).0;
            if !inside(p) {
                return Err(SimError::OutOfBounds {
                    t_us: t,
                    x: p[0],
                    y: p[1],
                });
            }
            if t == self.duration_us {
                return Ok(());
            }
            t = (t + 100).min(self.duration_us);
        }
    }

    pub fn kind(&self) -> &TrajectoryKind {
        &self.kind
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn duration_us(&self) -> u64 {
        self.duration_us
    }

    fn eval(&self, t_us: u64) -> ([f64; 2], [f64; 2]) {
        let t = t_us as f64 * 1e-6;
        match &self.kind {
            TrajectoryKind::Stationary { pos } => (*pos, [0.0, 0.0]),
            TrajectoryKind::Linear { start, velocity } => {
                ([start[0] + velocity[0] * t, start[1] + velocity[1] * t], *velocity)
            }
            TrajectoryKind::Circular {
                center,
                diameter,
                angular_rate,
                phase,
            } => {
                let r = diameter / 2.0;
                let a = phase + angular_rate * t;
                let (s, c) = a.sin_cos();
                (
                    [center[0] + r * c, center[1] + r * s],
                    [-r * angular_rate * s, r * angular_rate * c],
                )
            }
            TrajectoryKind::Waypoints(pts) => {
                let i = pts.partition_point(|(tk, _)| *tk <= t_us);
                if i == 0 {
                    (pts[0].1, [0.0, 0.0])
                } else if i == pts.len() {
                    (pts[i - 1].1, [0.0, 0.0])
                } else {
                    let (t0, p0) = pts[i - 1];
                    let (t1, p1) = pts[i];
                    let span = (t1 - t0) as f64 * 1e-6;
                    let f = (t_us - t0) as f64 * 1e-6 / span;
                    let v = [(p1[0] - p0[0]) / span, (p1[1] - p0[1]) / span];
                    ([p0[0] + (p1[0] - p0[0]) * f, p0[1] + (p1[1] - p0[1]) * f], v)
                }
            }
        }
    }

    fn check_t(&self, t_us: u64) -> Result<(), SimError> {
        if t_us > self.duration_us {
            Err(SimError::OutOfRange {
                t_us,
                duration_us: self.duration_us,
            })
        } else {
            Ok(())
        }
    }

    pub fn position(&self, t_us: u64) -> Result<[f64; 2], SimError> {
        self.check_t(t_us)?;
        Ok(self.eval(t_us).0)
    }

    pub fn velocity(&self, t_us: u64) -> Result<[f64; 2], SimError> {
        self.check_t(t_us)?;
        Ok(self.eval(t_us).1)
    }
}

/// Image-plane speed, px/s.
pub fn pixel_speed(traj: &Trajectory, t_us: u64) -> Result<f64, SimError> {
    let v = traj.velocity(t_us)?;
    Ok(v[0].hypot(v[1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedModel {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Fixed orientation, used unless `orientation_follows_velocity`.
    pub theta: f64,
    pub orientation_follows_velocity: bool,
    pub events_per_edge: f64,
    /// Events per pixel of travel.
    pub motion_event_rate: f64,
    /// Background events/s over the whole sensor.
    pub noise_rate: f64,
    /// Mean edge-to-event latency, µs.
    pub edge_latency_us: f64,
    /// Motion smear: the along-track std grows by `speed * motion_sweep_s`.
    pub motion_sweep_s: f64,
}

impl Default for LedModel {
    fn default() -> Self {
        Self {
            lambda1: 6.0,
            lambda2: 6.0,
            theta: 0.0,
            orientation_follows_velocity: false,
            events_per_edge: 30.0,
            motion_event_rate: 2.0,
            noise_rate: 30_000.0,
            edge_latency_us: 8.0,
            motion_sweep_s: 1e-3,
        }
    }
}

impl LedModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return Err(SimError::Led("axes must be positive"));
        }
        if !self.theta.is_finite() {
            return Err(SimError::Led("orientation must be finite"));
        }
        if !ok(self.events_per_edge) || !ok(self.motion_event_rate) || !ok(self.noise_rate) {
            return Err(SimError::Led("rates must be non-negative"));
        }
        if !ok(self.edge_latency_us) || !ok(self.motion_sweep_s) {
            return Err(SimError::Led("latency and sweep must be non-negative"));
        }
        Ok(())
    }

    /// Orientation at a given velocity.
    pub fn orientation(&self, velocity: [f64; 2]) -> f64 {
        if self.orientation_follows_velocity && (velocity[0] != 0.0 || velocity[1] != 0.0) {
            canonical_orientation(velocity[1].atan2(velocity[0]))
        } else {
            canonical_orientation(self.theta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventSource {
    Edge,
    Motion,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// 1 kHz samples, monotone in time.
    pub samples: Vec<TruthSample>,
    pub schedule: OnOffSchedule,
}

/// Linear interpolation of sampled positions; `None` outside the samples.
pub fn truth_position(samples: &[TruthSample], t: u64) -> Option<[f64; 2]> {
    let i = samples.partition_point(|s| s.t <= t);
    if i == 0 {
        return None;
    }
    let a = &samples[i - 1];
    match samples.get(i) {
        None if a.t == t => Some([a.x, a.y]),
        None => None,
        Some(b) => {
            let f = (t - a.t) as f64 / (b.t - a.t) as f64;
            Some([a.x + (b.x - a.x) * f, a.y + (b.y - a.y) * f])
        }
    }
}

/// Reads rows written by [`GroundTruth::write_csv`].
pub fn read_truth_csv<R: BufRead>(r: R) -> Result<Vec<TruthSample>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| FormatError::Parse {
            line: i + 1,
            msg: msg.to_owned(),
        };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad("bad number"));
        let level = match f[6] {
            "0" => Level::Off,
            "1" => Level::On,
            _ => return Err(bad("bit must be 0 or 1")),
        };
        out.push(TruthSample {
            t: f[0].parse().map_err(|_| bad("bad timestamp"))?,
            x: num(1)?,
            y: num(2)?,
            lambda1: num(3)?,
            lambda2: num(4)?,
            theta: num(5)?,
            level,
        });
    }
    Ok(out)
}

impl GroundTruth {
    pub fn position_at(&self, t: u64) -> Option<[f64; 2]> {
        truth_position(&self.samples, t)
    }

    /// `t_us,x,y,l1,l2,theta,bit` rows.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "t_us,x,y,l1,l2,theta,bit")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{:.4},{:.4},{:.4},{:.4},{:.6},{}",
                s.t,
                s.x,
                s.y,
                s.lambda1,
                s.lambda2,
                s.theta,
                s.level.bit()
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub events: Vec<Event>,
    /// Source of each event, same order as `events`.
    pub sources: Vec<EventSource>,
    pub truth: GroundTruth,
}

impl Simulation {
    pub fn count(&self, source: EventSource) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }
}

struct Renderer<'a> {
    traj: &'a Trajectory,
    rng: ChaCha8Rng,
    out: Vec<(Event, EventSource)>,
}

impl Renderer<'_> {
    fn emit(&mut self, t: u64, x: f64, y: f64, p: Polarity, src: EventSource) {
        if t > self.traj.duration_us {
            return;
        }
        let (xr, yr) = (x.round(), y.round());
        let s = self.traj.sensor;
        if xr >= 0.0 && yr >= 0.0 && xr < s.width as f64 && yr < s.height as f64 {
            self.out.push((Event::new(t, xr as u16, yr as u16, p), src));
        }
    }

    fn gaussian(&mut self, cov: &Spd2<f64>) -> [f64; 2] {
        // Cholesky of [[a, b], [b, c]]
        let l11 = cov.a.sqrt();
        let l21 = cov.b / l11;
        let l22 = (cov.c - l21 * l21).max(0.0).sqrt();
        let u: f64 = StandardNormal.sample(&mut self.rng);
        let v: f64 = StandardNormal.sample(&mut self.rng);
        [l11 * u, l21 * u + l22 * v]
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map_or(0, |d| d.sample(rng) as u64)
}

/// Renders the event stream and ground truth for `schedule` played on `led`
/// moving along `traj`.
pub fn simulate(
    traj: &Trajectory,
    led: &LedModel,
    schedule: &OnOffSchedule,
    seed: u64,
) -> Result<Simulation, SimError> {
    led.validate()?;
    if schedule.end_us > traj.duration_us {
        return Err(SimError::ScheduleTooLong {
            schedule_us: schedule.end_us,
            duration_us: traj.duration_us,
        });
    }
    let mut r = Renderer {
        traj,
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    let duration = traj.duration_us;
    let shape_at = |t: u64| {
        let (_, v) = traj.eval(t);
        cov_from_axes(led.lambda1, led.lambda2, led.orientation(v))
    };

    let latency = (led.edge_latency_us > 0.0).then(|| Exp::new(1.0 / led.edge_latency_us).expect("positive rate"));
    for edge in &schedule.edges {
        let n = poisson(&mut r.rng, led.events_per_edge);
        let p = match edge.level {
            Level::On => Polarity::On,
            Level::Off => Polarity::Off,
        };
        for _ in 0..n {
            let delay = latency.map_or(0.0, |d| d.sample(&mut r.rng));
            let t = edge.t + delay.round() as u64;
            let t_eval = t.min(duration);
            let (pos, _) = traj.eval(t_eval);
            let d = r.gaussian(&shape_at(t_eval));
            r.emit(t, pos[0] + d[0], pos[1] + d[1], p, EventSource::Edge);
        }
    }

    if led.motion_event_rate > 0.0 {
        let mut t0 = 0;
        while t0 < duration {
            let t1 = (t0 + MOTION_SLICE_US).min(duration);
            let mid = (t0 + t1) / 2;
            let (_, v) = traj.eval(mid);
            let speed = v[0].hypot(v[1]);
            if speed > 0.0 && schedule.level_at(mid) == Level::On {
                let mean = led.motion_event_rate * speed * (t1 - t0) as f64 * 1e-6;
                let n = poisson(&mut r.rng, mean);
                let u = [v[0] / speed, v[1] / speed];
                let sweep = speed * led.motion_sweep_s;
                for _ in 0..n {
                    let t = r.rng.random_range(t0..t1);
                    let (pos, _) = traj.eval(t);
                    let base = shape_at(t);
                    let smeared = Spd2 {
                        a: base.a + sweep * sweep * u[0] * u[0],
                        b: base.b + sweep * sweep * u[0] * u[1],
                        c: base.c + sweep * sweep * u[1] * u[1],
                    };
                    let d = r.gaussian(&smeared);
                    let ahead = d[0] * u[0] + d[1] * u[1] >= 0.0;
                    let p = if ahead { Polarity::On } else { Polarity::Off };
                    r.emit(t, pos[0] + d[0], pos[1] + d[1], p, EventSource::Motion);
                }
            }
            t0 = t1;
        }
    }

    let n_noise = poisson(&mut r.rng, led.noise_rate * duration as f64 * 1e-6);
    let (w, h) = (traj.sensor.width, traj.sensor.height);
    for _ in 0..n_noise {
        let t = r.rng.random_range(0..=duration);
        let x = r.rng.random_range(0..w);
        let y = r.rng.random_range(0..h);
        let p = if r.rng.random_bool(0.5) {
            Polarity::On
        } else {
            Polarity::Off
        };
        r.out.push((Event::new(t, x, y, p), EventSource::Noise));
    }

    let mut merged = r.out;
    merged.sort_by_key(|(e, _)| e.t);
    let (events, sources) = merged.into_iter().unzip();

    let samples = (0..=duration / TRUTH_PERIOD_US)
        .map(|k| {
            let t = k * TRUTH_PERIOD_US;
            let (pos, v) = traj.eval(t);
            TruthSample {
                t,
                x: pos[0],
                y: pos[1],
                lambda1: led.lambda1.max(led.lambda2),
                lambda2: led.lambda1.min(led.lambda2),
                theta: if led.lambda1 >= led.lambda2 {
                    led.orientation(v)
                } else {
                    canonical_orientation(led.orientation(v) + PI / 2.0)
                },
                level: schedule.level_at(t),
            }
        })
        .collect();

    Ok(Simulation {
        events,
        sources,
        truth: GroundTruth {
            samples,
            schedule: schedule.clone(),
        },
    })
}

const WORDS: [&str; 48] = [
    "light", "signal", "camera", "event", "pixel", "blink", "orbit", "river", "stone", "north", "quiet", "amber",
    "delta", "frame", "micro", "laser", "glass", "cloud", "metal", "spark", "tower", "field", "wind", "rain", "sun",
    "moon", "drone", "track", "lens", "wave", "pulse", "clock", "bit", "byte", "word", "text", "code", "link", "node",
    "path", "far", "near", "fast", "slow", "bright", "dark", "sharp", "soft",
];

/// Deterministic lowercase text of `n_words` words.
pub fn sample_text(seed: u64, n_words: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = (0..n_words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    words.join(" ").into_bytes()
}
