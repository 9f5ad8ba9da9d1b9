//! Text to LED schedule and back.
//!
//! Encoding is Manchester on-off keying, one bit per carrier period: a `1`
//! is OFF then ON, a `0` is ON then OFF, so every bit has a transition at its
//! midpoint. A frame is a 16-bit alternating preamble, the sync word
//! `0111_1110`, then each byte as start bit `0`, eight data bits LSB first and
//! stop bit `1`. The LED idles OFF.
//!
//! Decoding integrates event polarities into a decaying signal
//! `s <- s * exp(-dt / tau) + p`, turns it into levels with a two-threshold
//! comparator, recovers the bit clock from the preamble and samples each bit
//! a quarter period either side of its expected midpoint.

use std::io::{self, Write};

use thiserror::Error;

use crate::events::{Event, Polarity};

pub const MIN_CARRIER_HZ: f64 = 500.0;
pub const MAX_CARRIER_HZ: f64 = 20_000.0;
pub const DEFAULT_THETA_HI: f64 = 3.0;
pub const DEFAULT_THETA_LO: f64 = -3.0;
/// Replaces every character whose frame could not be read.
pub const SUBSTITUTION: u8 = b'|';

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModemError {
    #[error("nothing to encode")]
    EmptyText,
    #[error("carrier {0} Hz outside [{MIN_CARRIER_HZ}, {MAX_CARRIER_HZ}]")]
    Carrier(f64),
    #[error("thresholds need theta_hi > theta_lo (got {hi} and {lo})")]
    Thresholds { hi: f64, lo: f64 },
    #[error("decay constant must be positive")]
    Tau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Off,
    On,
}

impl Level {
    pub fn bit(self) -> u8 {
        match self {
            Level::Off => 0,
            Level::On => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub t: u64,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnOffSchedule {
    pub carrier_hz: f64,
    /// Strictly increasing, alternating levels, first edge switches ON.
    pub edges: Vec<Edge>,
    /// End of the last bit period.
    pub end_us: u64,
}

impl OnOffSchedule {
    /// LED level at `t` (OFF before the first edge).
    pub fn level_at(&self, t: u64) -> Level {
        match self.edges.partition_point(|e| e.t <= t) {
            0 => Level::Off,
            i => self.edges[i - 1].level,
        }
    }

    pub fn shifted(&self, offset_us: u64) -> Self {
        Self {
            carrier_hz: self.carrier_hz,
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    t: e.t + offset_us,
                    level: e.level,
                })
                .collect(),
            end_us: self.end_us + offset_us,
        }
    }

    pub fn bit_period_us(&self) -> f64 {
        1e6 / self.carrier_hz
    }

    /// `t_us,level` rows.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "t_us,level")?;
        for e in &self.edges {
            writeln!(w, "{},{}", e.t, e.level.bit())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameFormat {
    pub preamble: Vec<u8>,
    pub sync: Vec<u8>,
}

impl Default for FrameFormat {
    fn default() -> Self {
        Self {
            preamble: (0..16).map(|i| 1 - (i % 2) as u8).collect(),
            sync: vec![0, 1, 1, 1, 1, 1, 1, 0],
        }
    }
}

impl FrameFormat {
    /// Full bit sequence for `text`.
    pub fn bits(&self, text: &[u8]) -> Vec<u8> {
        let mut bits = Vec::with_capacity(self.preamble.len() + self.sync.len() + 10 * text.len());
        bits.extend_from_slice(&self.preamble);
        bits.extend_from_slice(&self.sync);
        for &byte in text {
            bits.push(0);
            bits.extend((0..8).map(|i| (byte >> i) & 1));
            bits.push(1);
        }
        bits
    }
}

fn check_carrier(carrier_hz: f64) -> Result<(), ModemError> {
    if (MIN_CARRIER_HZ..=MAX_CARRIER_HZ).contains(&carrier_hz) {
        Ok(())
    } else {
        Err(ModemError::Carrier(carrier_hz))
    }
}

pub fn encode(text: &[u8], carrier_hz: f64) -> Result<OnOffSchedule, ModemError> {
    encode_with(text, carrier_hz, &FrameFormat::default())
}

pub fn encode_with(text: &[u8], carrier_hz: f64, fmt: &FrameFormat) -> Result<OnOffSchedule, ModemError> {
    if text.is_empty() {
        return Err(ModemError::EmptyText);
    }
    check_carrier(carrier_hz)?;
    let bits = fmt.bits(text);
    let half = 0.5e6 / carrier_hz;
    let boundary = |j: usize| (j as f64 * half).round() as u64;
    let halves = bits.iter().flat_map(|&b| {
        if b == 1 {
            [Level::Off, Level::On]
        } else {
            [Level::On, Level::Off]
        }
    });
    let mut edges = Vec::with_capacity(bits.len() * 2);
    let mut current = Level::Off;
    for (j, level) in halves.chain(std::iter::once(Level::Off)).enumerate() {
        if level != current {
            edges.push(Edge { t: boundary(j), level });
            current = level;
        }
    }
    Ok(OnOffSchedule {
        carrier_hz,
        edges,
        end_us: boundary(2 * bits.len()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalSample {
    pub t: u64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub t: u64,
    pub level: Level,
}

pub fn default_tau(carrier_hz: f64) -> f64 {
    1.0 / (4.0 * carrier_hz)
}

/// Streaming signal reconstruction plus two-threshold comparator.
#[derive(Debug, Clone, PartialEq)]
pub struct HysteresisDecoder {
    /// Seconds.
    pub decay_tau: f64,
    pub theta_hi: f64,
    pub theta_lo: f64,
    state: Level,
    s: f64,
    last_t: Option<u64>,
}

impl HysteresisDecoder {
    pub fn new(carrier_hz: f64) -> Self {
        Self::with_thresholds(default_tau(carrier_hz), DEFAULT_THETA_HI, DEFAULT_THETA_LO)
            .expect("default thresholds are valid")
    }

    pub fn with_thresholds(decay_tau: f64, theta_hi: f64, theta_lo: f64) -> Result<Self, ModemError> {
        if !(decay_tau > 0.0 && decay_tau.is_finite()) {
            return Err(ModemError::Tau);
        }
        if !(theta_hi > theta_lo) {
            return Err(ModemError::Thresholds {
                hi: theta_hi,
                lo: theta_lo,
            });
        }
        Ok(Self {
            decay_tau,
            theta_hi,
            theta_lo,
            state: Level::Off,
            s: 0.0,
            last_t: None,
        })
    }

    pub fn state(&self) -> Level {
        self.state
    }

    pub fn signal(&self) -> f64 {
        self.s
    }

    /// Integrates one polarity sample; returns the sample and any level change.
    pub fn feed(&mut self, t: u64, p: f64) -> (SignalSample, Option<Transition>) {
        if let Some(prev) = self.last_t {
            let dt = t.saturating_sub(prev) as f64 * 1e-6;
            self.s *= (-dt / self.decay_tau).exp();
        }
        self.s += p;
        self.last_t = Some(t);
        let sample = SignalSample { t, s: self.s };
        (sample, self.compare(sample))
    }

    fn compare(&mut self, sample: SignalSample) -> Option<Transition> {
        let next = match self.state {
            Level::Off if sample.s >= self.theta_hi => Level::On,
            Level::On if sample.s <= self.theta_lo => Level::Off,
            _ => return None,
        };
        self.state = next;
        Some(Transition {
            t: sample.t,
            level: next,
        })
    }

    pub fn feed_event(&mut self, e: &Event) -> Option<Transition> {
        self.feed(e.t, e.p.sign() as f64).1
    }
}

pub fn reconstruct_signal(events: &[Event], decay_tau: f64) -> Vec<SignalSample> {
    let mut d = HysteresisDecoder::with_thresholds(decay_tau, f64::INFINITY, f64::NEG_INFINITY)
        .expect("caller supplies a positive tau");
    events.iter().map(|e| d.feed(e.t, e.p.sign() as f64).0).collect()
}

/// Level changes of the comparator over a sampled signal, starting LOW.
pub fn hysteresis_bits(signal: &[SignalSample], theta_hi: f64, theta_lo: f64) -> Vec<Transition> {
    let mut d = HysteresisDecoder {
        decay_tau: 1.0,
        theta_hi,
        theta_lo,
        state: Level::Off,
        s: 0.0,
        last_t: None,
    };
    signal.iter().filter_map(|&smp| d.compare(smp)).collect()
}

/// Thresholds at +-half the median burst peak seen over the first
/// `preamble_bits` periods of signal activity.
pub fn auto_thresholds(signal: &[SignalSample], carrier_hz: f64, preamble_bits: usize) -> (f64, f64) {
    let Some(start) = signal.iter().find(|s| s.s.abs() >= 1.0) else {
        return (DEFAULT_THETA_HI, DEFAULT_THETA_LO);
    };
    let half = 0.5e6 / carrier_hz;
    let slots = 2 * preamble_bits;
    let mut peaks = vec![0.0f64; slots];
    for smp in signal.iter().skip_while(|s| s.t < start.t) {
        let slot = ((smp.t - start.t) as f64 / half) as usize;
        if slot >= slots {
            break;
        }
        peaks[slot] = peaks[slot].max(smp.s.abs());
    }
    peaks.retain(|&p| p > 0.0);
    if peaks.is_empty() {
        return (DEFAULT_THETA_HI, DEFAULT_THETA_LO);
    }
    peaks.sort_by(f64::total_cmp);
    let level = (0.5 * peaks[peaks.len() / 2]).max(1.0);
    (level, -level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStatus {
    Ok,
    NoPreamble,
    NoSync,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub bytes: Vec<u8>,
    /// Per byte: framing and all data bits were read.
    pub intact: Vec<bool>,
    pub status: DecodeStatus,
    /// Recovered bit period, µs.
    pub bit_period_us: Option<f64>,
}

impl Decoded {
    fn failed(status: DecodeStatus, bit_period_us: Option<f64>) -> Self {
        Self {
            bytes: Vec::new(),
            intact: Vec::new(),
            status,
            bit_period_us,
        }
    }

    /// Fraction of intact characters in each whitespace-separated word.
    pub fn word_confidence(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let (mut ok, mut n) = (0usize, 0usize);
        for (&b, &good) in self.bytes.iter().zip(&self.intact) {
            if b.is_ascii_whitespace() {
                if n > 0 {
                    out.push(ok as f64 / n as f64);
                }
                (ok, n) = (0, 0);
            } else {
                n += 1;
                ok += good as usize;
            }
        }
        if n > 0 {
            out.push(ok as f64 / n as f64);
        }
        out
    }
}

fn level_at(transitions: &[Transition], t: f64) -> Level {
    match transitions.partition_point(|tr| (tr.t as f64) <= t) {
        0 => Level::Off,
        i => transitions[i - 1].level,
    }
}

/// First run of at least four transitions spaced about one bit period apart.
fn find_anchor(transitions: &[Transition], nominal: f64) -> Option<(usize, f64)> {
    let close = |a: &Transition, b: &Transition| {
        let d = (b.t - a.t) as f64;
        (0.75 * nominal..=1.25 * nominal).contains(&d)
    };
    let mut i = 0;
    while i + 3 < transitions.len() {
        let mut j = i;
        while j + 1 < transitions.len() && close(&transitions[j], &transitions[j + 1]) {
            j += 1;
        }
        if j - i >= 3 {
            let mut gaps: Vec<u64> = transitions[i..=j].windows(2).map(|w| w[1].t - w[0].t).collect();
            gaps.sort_unstable();
            let mid = gaps.len() / 2;
            let median = if gaps.len() % 2 == 1 {
                gaps[mid] as f64
            } else {
                0.5 * (gaps[mid - 1] + gaps[mid]) as f64
            };
            return Some((i, median));
        }
        i = j.max(i + 1);
    }
    None
}

/// Reads bytes back from comparator transitions.
pub fn frame_decode(transitions: &[Transition], fmt: &FrameFormat, carrier_hz: f64) -> Decoded {
    let nominal = 1e6 / carrier_hz;
    let Some((anchor, period)) = find_anchor(transitions, nominal) else {
        return Decoded::failed(DecodeStatus::NoPreamble, None);
    };
    let last = transitions.last().map_or(0.0, |t| t.t as f64);
    let quarter = period / 4.0;

    let mut bits: Vec<Option<u8>> = Vec::new();
    let mut mid = transitions[anchor].t as f64;
    while mid <= last + period {
        let before = level_at(transitions, mid - quarter);
        let after = level_at(transitions, mid + quarter);
        bits.push((before != after).then_some(after.bit()));
        let predicted = mid + period;
        let lo = transitions.partition_point(|t| (t.t as f64) < predicted - quarter);
        let nearest = transitions[lo..]
            .iter()
            .take_while(|t| (t.t as f64) <= predicted + quarter)
            .min_by(|a, b| {
                let da = (a.t as f64 - predicted).abs();
                let db = (b.t as f64 - predicted).abs();
                da.total_cmp(&db)
            });
        mid = nearest.map_or(predicted, |t| t.t as f64);
    }

    let sync: Vec<Option<u8>> = fmt.sync.iter().map(|&b| Some(b)).collect();
    let Some(sync_at) = bits.windows(sync.len()).position(|w| w == sync.as_slice()) else {
        return Decoded::failed(DecodeStatus::NoSync, Some(period));
    };

    let mut bytes = Vec::new();
    let mut intact = Vec::new();
    let payload = &bits[sync_at + sync.len()..];
    for frame in payload.chunks(10) {
        if frame.iter().all(Option::is_none) {
            break;
        }
        let framed = frame.len() == 10 && frame[0] == Some(0) && frame[9] == Some(1);
        let data: Option<u8> = frame.get(1..9).filter(|d| d.len() == 8).and_then(|d| {
            d.iter()
                .enumerate()
                .try_fold(0u8, |acc, (i, b)| b.map(|b| acc | (b << i)))
        });
        match (framed, data) {
            (true, Some(byte)) => {
                bytes.push(byte);
                intact.push(true);
            }
            _ => {
                bytes.push(SUBSTITUTION);
                intact.push(false);
            }
        }
    }
    Decoded {
        bytes,
        intact,
        status: DecodeStatus::Ok,
        bit_period_us: Some(period),
    }
}

/// Offline decode of an event stream: signal, optional auto thresholds,
/// comparator, framing.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub carrier_hz: f64,
    pub decay_tau: Option<f64>,
    pub theta_hi: f64,
    pub theta_lo: f64,
    pub auto_threshold: bool,
    pub format: FrameFormat,
}

impl DecoderConfig {
    pub fn new(carrier_hz: f64) -> Self {
        Self {
            carrier_hz,
            decay_tau: None,
            theta_hi: DEFAULT_THETA_HI,
            theta_lo: DEFAULT_THETA_LO,
            auto_threshold: false,
            format: FrameFormat::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModemError> {
        check_carrier(self.carrier_hz)?;
        HysteresisDecoder::with_thresholds(self.tau(), self.theta_hi, self.theta_lo).map(|_| ())
    }

    pub fn tau(&self) -> f64 {
        self.decay_tau.unwrap_or_else(|| default_tau(self.carrier_hz))
    }
}

pub fn decode_events(events: &[Event], cfg: &DecoderConfig) -> Result<Decoded, ModemError> {
    cfg.validate()?;
    let signal = reconstruct_signal(events, cfg.tau());
    let (hi, lo) = if cfg.auto_threshold {
        auto_thresholds(&signal, cfg.carrier_hz, cfg.format.preamble.len())
    } else {
        (cfg.theta_hi, cfg.theta_lo)
    };
    let transitions = hysteresis_bits(&signal, hi, lo);
    Ok(frame_decode(&transitions, &cfg.format, cfg.carrier_hz))
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub word: f64,
    pub character: f64,
    pub words_matched: usize,
    pub words_total: usize,
}

/// Words (whitespace tokens) and bytes of `reference` recovered in order,
/// via longest common subsequence. An empty reference scores 1 if the output
/// is empty too.
pub fn word_accuracy(decoded: &[u8], reference: &[u8]) -> Accuracy {
    let words = |s: &[u8]| -> Vec<Vec<u8>> {
        s.split(|b| b.is_ascii_whitespace())
            .filter(|w| !w.is_empty())
            .map(<[u8]>::to_vec)
            .collect()
    };
    let (dw, rw) = (words(decoded), words(reference));
    let matched = lcs_len(&dw, &rw);
    let ratio = |m: usize, n: usize, other: usize| {
        if n == 0 {
            if other == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            m as f64 / n as f64
        }
    };
    Accuracy {
        word: ratio(matched, rw.len(), dw.len()),
        character: ratio(lcs_len(decoded, reference), reference.len(), decoded.len()),
        words_matched: matched,
        words_total: rw.len(),
    }
}

/// Events an ideal sensor would report for `schedule`: `burst` events at
/// every edge, ON edges positive, all at pixel `(x, y)`.
pub fn ideal_events(schedule: &OnOffSchedule, burst: usize, x: u16, y: u16) -> Vec<Event> {
    schedule
        .edges
        .iter()
        .flat_map(|e| {
            let p = match e.level {
                Level::On => Polarity::On,
                Level::Off => Polarity::Off,
            };
            std::iter::repeat_n(Event::new(e.t, x, y, p), burst)
        })
        .collect()
}
