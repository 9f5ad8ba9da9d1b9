//! Event data types and fixed-window packetization.
//!
//! Timestamps are integer microseconds throughout. Packets are aligned to
//! absolute multiples of the window length so that silent windows exist as
//! empty packets; the decoder relies on seeing them.

pub mod io;
pub mod ring;

use thiserror::Error;

pub use ring::{ring_buffer, Consumer, Producer, RingStats};

/// Default packet window, in microseconds.
pub const DEFAULT_WINDOW_US: u64 = 4000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EventError {
    #[error("event stream not sorted: event {index} at t={t_us}us precedes previous t={prev_us}us")]
    Unsorted { index: usize, t_us: u64, prev_us: u64 },
    #[error("window length must be positive")]
    ZeroWindow,
    #[error("event {index} at ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("invalid polarity {0}; expected 1 or -1")]
    Polarity(i64),
}

/// Sign of a brightness change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    #[inline]
    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn from_sign(p: i64) -> Result<Self, EventError> {
        match p {
            1 => Ok(Polarity::On),
            -1 => Ok(Polarity::Off),
            other => Err(EventError::Polarity(other)),
        }
    }
}

/// A single pixel activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Pixel dimensions of the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorSize {
    pub width: u16,
    pub height: u16,
}

impl SensorSize {
    /// 1280x720, the resolution of common HD event sensors.
    pub const HD: SensorSize = SensorSize {
        width: 1280,
        height: 720,
    };

    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    #[inline]
    pub fn contains(&self, x: u16, y: u16) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for SensorSize {
    fn default() -> Self {
        Self::HD
    }
}

/// All events falling in `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventPacket {
    pub t_start: u64,
    pub t_end: u64,
    pub events: Vec<Event>,
}

impl EventPacket {
    pub fn new(t_start: u64, t_end: u64, events: Vec<Event>) -> Self {
        debug_assert!(t_end >= t_start);
        Self { t_start, t_end, events }
    }

    pub fn empty(t_start: u64, t_end: u64) -> Self {
        Self::new(t_start, t_end, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn window_us(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Same window, different contents.
    pub fn with_events(&self, events: Vec<Event>) -> Self {
        Self::new(self.t_start, self.t_end, events)
    }

    pub fn check_bounds(&self, sensor: SensorSize) -> Result<(), EventError> {
        check_bounds(&self.events, sensor)
    }
}

pub fn check_sorted(stream: &[Event]) -> Result<(), EventError> {
    for (i, w) in stream.windows(2).enumerate() {
        if w[1].t < w[0].t {
            return Err(EventError::Unsorted {
                index: i + 1,
                t_us: w[1].t,
                prev_us: w[0].t,
            });
        }
    }
    Ok(())
}

pub fn check_bounds(stream: &[Event], sensor: SensorSize) -> Result<(), EventError> {
    match stream.iter().enumerate().find(|(_, e)| !sensor.contains(e.x, e.y)) {
        Some((index, e)) => Err(EventError::OutOfBounds {
            index,
            x: e.x,
            y: e.y,
            width: sensor.width,
            height: sensor.height,
        }),
        None => Ok(()),
    }
}

/// Splits a time-sorted stream into absolute-aligned windows.
///
/// The first packet starts at the first event's time floored to a multiple of
/// `window_us`; every window up to the one holding the last event is emitted,
/// empty or not.
pub fn packetize(stream: &[Event], window_us: u64) -> Result<Vec<EventPacket>, EventError> {
    if window_us == 0 {
        return Err(EventError::ZeroWindow);
    }
    check_sorted(stream)?;
    let (first, last) = match (stream.first(), stream.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Ok(Vec::new()),
    };
    let start = first / window_us * window_us;
    let n = ((last - start) / window_us + 1) as usize;
    let mut packets: Vec<EventPacket> = (0..n as u64)
        .map(|i| EventPacket::empty(start + i * window_us, start + (i + 1) * window_us))
        .collect();
    for e in stream {
        let idx = ((e.t - start) / window_us) as usize;
        packets[idx].events.push(*e);
    }
    Ok(packets)
}

/// Streaming counterpart of [`packetize`] for sources that are not fully in memory.
#[derive(Debug)]
pub struct Packetizer {
    window_us: u64,
    current: Option<EventPacket>,
    last_t: Option<u64>,
}

impl Packetizer {
    pub fn new(window_us: u64) -> Result<Self, EventError> {
        if window_us == 0 {
            return Err(EventError::ZeroWindow);
        }
        Ok(Self {
            window_us,
            current: None,
            last_t: None,
        })
    }

    /// Feeds one event; completed packets (including empty gap windows) are
    /// appended to `out`.
    pub fn push(&mut self, e: Event, out: &mut Vec<EventPacket>) -> Result<(), EventError> {
        if let Some(prev) = self.last_t {
            if e.t < prev {
                return Err(EventError::Unsorted {
                    index: 0,
                    t_us: e.t,
                    prev_us: prev,
                });
            }
        }
        self.last_t = Some(e.t);
        let w = self.window_us;
        let cur = self.current.get_or_insert_with(|| {
            let s = e.t / w * w;
            EventPacket::empty(s, s + w)
        });
        while e.t >= cur.t_end {
            let next = EventPacket::empty(cur.t_end, cur.t_end + w);
            out.push(std::mem::replace(cur, next));
        }
        cur.events.push(e);
        Ok(())
    }

    pub fn finish(self) -> Option<EventPacket> {
        self.current
    }
}
