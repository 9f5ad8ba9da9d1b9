//! Bounded single-producer/single-consumer queue with drop-oldest overflow.
//!
//! The storage is a lock-free `crossbeam_queue::ArrayQueue`; the split
//! [`Producer`]/[`Consumer`] handles are not `Clone`, which is what restricts
//! each buffer to one writer and one reader.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_queue::ArrayQueue;

/// Default capacity in packets (about 256 ms of 4 ms windows).
pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug)]
struct Shared<T> {
    queue: ArrayQueue<T>,
    pushes: AtomicU64,
    pops: AtomicU64,
    overflow: AtomicU64,
}

/// Counter snapshot. `pushes == pops + retained + overflow` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RingStats {
    pub pushes: u64,
    pub pops: u64,
    pub retained: u64,
    pub overflow: u64,
    pub capacity: usize,
}

#[derive(Debug)]
pub struct Producer<T> {
    shared: Arc<Shared<T>>,
}

#[derive(Debug)]
pub struct Consumer<T> {
    shared: Arc<Shared<T>>,
}

/// Creates a connected producer/consumer pair.
///
/// # Panics
/// If `capacity` is zero.
pub fn ring_buffer<T>(capacity: usize) -> (Producer<T>, Consumer<T>) {
    let shared = Arc::new(Shared {
        queue: ArrayQueue::new(capacity),
        pushes: AtomicU64::new(0),
        pops: AtomicU64::new(0),
        overflow: AtomicU64::new(0),
    });
    (
        Producer {
            shared: Arc::clone(&shared),
        },
        Consumer { shared },
    )
}

fn stats<T>(s: &Shared<T>) -> RingStats {
    // pushes is bumped before the item lands, so read it last.
    let pops = s.pops.load(Ordering::Acquire);
    let overflow = s.overflow.load(Ordering::Acquire);
    let retained = s.queue.len() as u64;
    let pushes = s.pushes.load(Ordering::Acquire);
    RingStats {
        pushes,
        pops,
        retained,
        overflow,
        capacity: s.queue.capacity(),
    }
}

impl<T> Producer<T> {
    /// Never blocks. When full, the oldest retained item is dropped and
    /// counted as overflow.
    pub fn push(&mut self, item: T) {
        let s = &self.shared;
        if s.queue.force_push(item).is_some() {
            s.overflow.fetch_add(1, Ordering::AcqRel);
        }
        s.pushes.fetch_add(1, Ordering::AcqRel);
    }

    /// Lossless variant: hands the item back when the queue is full.
    pub fn try_push(&mut self, item: T) -> Result<(), T> {
        self.shared.queue.push(item)?;
        self.shared.pushes.fetch_add(1, Ordering::AcqRel);
        Ok(())
    }

    pub fn stats(&self) -> RingStats {
        stats(&self.shared)
    }

    /// True once the consumer handle has been dropped.
    pub fn is_abandoned(&self) -> bool {
        Arc::strong_count(&self.shared) == 1
    }
}

impl<T> Consumer<T> {
    pub fn pop(&mut self) -> Option<T> {
        let item = self.shared.queue.pop()?;
        self.shared.pops.fetch_add(1, Ordering::AcqRel);
        Some(item)
    }

    pub fn len(&self) -> usize {
        self.shared.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.queue.is_empty()
    }

    pub fn stats(&self) -> RingStats {
        stats(&self.shared)
    }

    /// True once the producer handle has been dropped.
    pub fn is_abandoned(&self) -> bool {
        Arc::strong_count(&self.shared) == 1
    }
}
