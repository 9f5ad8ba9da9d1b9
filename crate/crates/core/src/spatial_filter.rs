//! Grid pre-filter: keeps events whose cell, or one of its eight neighbours,
//! is active in the current packet.
//!
//! Filtering is two-pass per packet (count, then select), so the survivor set
//! does not depend on event order within the packet. Counters are cleared at
//! the end of every packet.

use thiserror::Error;

use crate::events::{EventPacket, SensorSize};

pub const DEFAULT_CELL_SIZE: u16 = 16;
pub const DEFAULT_ACTIVITY_THRESHOLD: u32 = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("cell size must be positive")]
    ZeroCellSize,
    #[error("sensor has zero area")]
    EmptySensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridFilterConfig {
    pub cell_size: u16,
    pub activity_threshold: u32,
}

impl Default for GridFilterConfig {
    fn default() -> Self {
        Self {
            cell_size: DEFAULT_CELL_SIZE,
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridFilter {
    sensor: SensorSize,
    config: GridFilterConfig,
    cols: usize,
    rows: usize,
    col_of: Vec<u32>,
    row_of: Vec<u32>,
    /// Cell itself plus up to eight neighbours, padded with `u32::MAX`.
    neighbors: Vec<[u32; 9]>,
    counts: Vec<u32>,
    touched: Vec<u32>,
}

impl GridFilter {
    pub fn new(sensor: SensorSize, config: GridFilterConfig) -> Result<Self, FilterError> {
        if config.cell_size == 0 {
            return Err(FilterError::ZeroCellSize);
        }
        if sensor.width == 0 || sensor.height == 0 {
            return Err(FilterError::EmptySensor);
        }
        let cs = config.cell_size as usize;
        let cols = (sensor.width as usize).div_ceil(cs);
        let rows = (sensor.height as usize).div_ceil(cs);
        let col_of = (0..sensor.width as usize).map(|x| (x / cs) as u32).collect();
        let row_of = (0..sensor.height as usize).map(|y| (y / cs) as u32).collect();
        let mut neighbors = Vec::with_capacity(cols * rows);
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                let mut n = [u32::MAX; 9];
                let mut k = 0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && cc >= 0 && rr < rows as i64 && cc < cols as i64 {
                            n[k] = (rr as usize * cols + cc as usize) as u32;
                            k += 1;
                        }
                    }
                }
                neighbors.push(n);
            }
        }
        Ok(Self {
            sensor,
            config,
            cols,
            rows,
            col_of,
            row_of,
            neighbors,
            counts: vec![0; cols * rows],
            touched: Vec::new(),
        })
    }

    pub fn config(&self) -> GridFilterConfig {
        self.config
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    /// Cell index of a pixel. Pixels outside the sensor have no cell.
    pub fn cell_of(&self, x: u16, y: u16) -> Option<usize> {
        if !self.sensor.contains(x, y) {
            return None;
        }
        Some(self.row_of[y as usize] as usize * self.cols + self.col_of[x as usize] as usize)
    }

    /// The 3x3 neighbourhood of a cell (including itself).
    pub fn neighborhood(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[cell]
            .iter()
            .take_while(|&&n| n != u32::MAX)
            .map(|&n| n as usize)
    }

    /// Out-of-bounds events are dropped.
    pub fn filter_packet(&mut self, packet: &EventPacket) -> EventPacket {
        let thr = self.config.activity_threshold;
        for e in &packet.events {
            if let Some(c) = self.cell_of(e.x, e.y) {
                if self.counts[c] == 0 {
                    self.touched.push(c as u32);
                }
                self.counts[c] += 1;
            }
        }
        let out = packet
            .events
            .iter()
            .filter(|e| {
                self.cell_of(e.x, e.y)
                    .is_some_and(|c| self.neighborhood(c).any(|n| self.counts[n] >= thr))
            })
            .copied()
            .collect();
        for &c in &self.touched {
            self.counts[c as usize] = 0;
        }
        self.touched.clear();
        packet.with_events(out)
    }
}

/// `|out| / |in|`, zero for an empty input.
pub fn reduction_ratio(input: &EventPacket, output: &EventPacket) -> f64 {
    if input.is_empty() {
        0.0
    } else {
        output.len() as f64 / input.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity};
    use proptest::prelude::*;

    fn ev(x: u16, y: u16) -> Event {
        Event::new(0, x, y, Polarity::On)
    }

    fn filter() -> GridFilter {
        GridFilter::new(SensorSize::new(320, 240), GridFilterConfig::default()).unwrap()
    }

    fn packet(events: Vec<Event>) -> EventPacket {
        EventPacket::new(0, 4000, events)
    }

    /// Survivors by direct neighbourhood counting over the whole packet.
    fn brute_force(events: &[Event], cs: u16, thr: u32) -> Vec<Event> {
        let cell = |e: &Event| ((e.x / cs) as i64, (e.y / cs) as i64);
        events
            .iter()
            .filter(|e| {
                let (cx, cy) = cell(e);
                (-1..=1).any(|dx| {
                    (-1..=1).any(|dy| events.iter().filter(|o| cell(o) == (cx + dx, cy + dy)).count() as u32 >= thr)
                })
            })
            .copied()
            .collect()
    }

    #[test]
    fn dense_cell_survives() {
        let evs: Vec<Event> = (0..10).map(|i| ev(20 + i, 20)).collect();
        assert_eq!(filter().filter_packet(&packet(evs)).len(), 10);
    }

    #[test]
    fn isolated_events_removed() {
        let evs: Vec<Event> = (0..10).map(|i| ev(i * 32, (i % 4) * 48)).collect();
        assert_eq!(filter().filter_packet(&packet(evs)).len(), 0);
    }

    #[test]
    fn cluster_neighbor_and_far_event() {
        let mut evs: Vec<Event> = (0..5).map(|i| ev(40 + i, 40)).collect();
        evs.push(ev(50, 60)); // cell (3, 3), neighbour of (2, 2)
        evs.push(ev(300, 200));
        let expected = brute_force(&evs, 16, 3);
        assert_eq!(expected.len(), 6);
        assert_eq!(filter().filter_packet(&packet(evs)).events, expected);
    }

    #[test]
    fn ratio() {
        let empty = packet(vec![]);
        assert_eq!(reduction_ratio(&empty, &empty), 0.0);
        let a = packet(vec![ev(1, 1); 4]);
        let b = packet(vec![ev(1, 1); 1]);
        assert_eq!(reduction_ratio(&a, &b), 0.25);
    }

    #[test]
    fn neighbor_table_symmetric() {
        let f = filter();
        let (c, r) = f.grid_dims();
        assert_eq!((c, r), (20, 15));
        for cell in 0..c * r {
            for n in f.neighborhood(cell) {
                assert!(f.neighborhood(n).any(|m| m == cell));
            }
        }
        assert_eq!(f.neighborhood(0).count(), 4);
        assert_eq!(f.neighborhood(c + 1).count(), 9);
    }

    #[test]
    fn counters_reset_between_packets() {
        let mut f = filter();
        let two: Vec<Event> = (0..2).map(|i| ev(i, 0)).collect();
        assert_eq!(f.filter_packet(&packet(two.clone())).len(), 0);
        assert_eq!(f.filter_packet(&packet(two)).len(), 0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GridFilterConfig {
            cell_size: 0,
            ..Default::default()
        };
        assert_eq!(
            GridFilter::new(SensorSize::HD, cfg).unwrap_err(),
            FilterError::ZeroCellSize
        );
    }

    fn arb_events() -> impl Strategy<Value = Vec<Event>> {
        proptest::collection::vec((0u16..320, 0u16..240).prop_map(|(x, y)| ev(x, y)), 0..200)
    }

    proptest! {
        #[test]
        fn matches_brute_force(evs in arb_events(), thr in 1u32..6) {
            let mut f = GridFilter::new(SensorSize::new(320, 240), GridFilterConfig { cell_size: 16, activity_threshold: thr }).unwrap();
            prop_assert_eq!(f.filter_packet(&packet(evs.clone())).events, brute_force(&evs, 16, thr));
        }

        #[test]
        fn idempotent_subset_ordered(evs in arb_events()) {
            let mut f = filter();
            let once = f.filter_packet(&packet(evs.clone()));
            let twice = f.filter_packet(&once);
            prop_assert_eq!(&once, &twice);
            // ordered subsequence of the input
            let mut it = evs.iter();
            for e in &once.events {
                prop_assert!(it.any(|x| x == e));
            }
        }

        #[test]
        fn threshold_monotone(evs in arb_events(), thr in 1u32..8) {
            let mk = |t| GridFilter::new(SensorSize::new(320, 240), GridFilterConfig { cell_size: 16, activity_threshold: t }).unwrap();
            let lo = mk(thr).filter_packet(&packet(evs.clone()));
            let hi = mk(thr + 1).filter_packet(&packet(evs));
            prop_assert!(hi.events.iter().all(|e| lo.events.contains(e)));
            prop_assert!(hi.len() <= lo.len());
        }

        #[test]
        fn order_independent(mut evs in arb_events()) {
            let mut f = filter();
            let fwd = f.filter_packet(&packet(evs.clone())).len();
            evs.reverse();
            prop_assert_eq!(f.filter_packet(&packet(evs)).len(), fwd);
        }
    }
}
