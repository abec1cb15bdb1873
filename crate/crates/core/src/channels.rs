//! The one-slot handshake and the per-learner gradient ring.
//!
//! Both structures connect exactly one producer thread with one consumer
//! thread. Blocking sides wait on a condition variable inside a predicate
//! loop; [`close`](SlotHandshake::close) wakes every waiter so teardown never
//! hangs. The parameter server only ever calls the non-blocking
//! [`GradientQueue::try_dequeue_into`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Condvar, Mutex, MutexGuard};

use crate::monitor::{Probe, WaitMonitor};
use crate::types::GradientMsg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("channel closed")]
    Closed,
    #[error("producer abandoned the operation")]
    Abandoned,
}

struct Slot<T> {
    count: u8,
    closed: bool,
    value: T,
}

/// One-slot producer/consumer channel. `count` alternates between 0 and 1;
/// the payload `T` is the staging buffer the two sides hand over.
pub struct SlotHandshake<T> {
    slot: Mutex<Slot<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    probe: Option<Probe>,
}

impl<T> SlotHandshake<T> {
    pub fn new(value: T) -> Self {
        SlotHandshake {
            slot: Mutex::new(Slot {
                count: 0,
                closed: false,
                value,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            probe: None,
        }
    }

    /// Attaches wait instrumentation; `guard`, `producer` and `consumer` are
    /// the names reported to the monitor.
    pub fn instrumented(value: T, monitor: Arc<WaitMonitor>, guard: &str, producer: &str, consumer: &str) -> Self {
        SlotHandshake {
            probe: Some(Probe {
                monitor,
                guard: guard.into(),
                producer: producer.into(),
                consumer: consumer.into(),
            }),
            ..Self::new(value)
        }
    }

    fn lock(&self, as_producer: bool) -> MutexGuard<'_, Slot<T>> {
        if let Some(p) = &self.probe {
            let me = if as_producer { &p.producer } else { &p.consumer };
            p.monitor.acquiring(me, &p.guard);
            let g = self.slot.lock();
            WaitMonitor::acquired(&p.guard);
            g
        } else {
            self.slot.lock()
        }
    }

    fn unlock(&self, g: MutexGuard<'_, Slot<T>>) {
        drop(g);
        if let Some(p) = &self.probe {
            WaitMonitor::released(&p.guard);
        }
    }

    /// Records that the producer (or consumer) was signalled by its
    /// counterpart and is no longer blocked.
    fn woke(&self, producer: bool) {
        if let Some(p) = &self.probe {
            if producer {
                p.monitor.woke(&p.producer, &p.consumer);
            } else {
                p.monitor.woke(&p.consumer, &p.producer);
            }
        }
    }

    fn wait(&self, g: &mut MutexGuard<'_, Slot<T>>, as_producer: bool) {
        match &self.probe {
            Some(p) => {
                let (me, other) = if as_producer {
                    (&p.producer, &p.consumer)
                } else {
                    (&p.consumer, &p.producer)
                };
                // The guard is released for the duration of the wait.
                WaitMonitor::released(&p.guard);
                p.monitor.begin_wait(me, other);
                if as_producer {
                    self.not_full.wait(g);
                } else {
                    self.not_empty.wait(g);
                }
                p.monitor.end_wait(me);
                WaitMonitor::acquired(&p.guard);
            }
            None if as_producer => self.not_full.wait(g),
            None => self.not_empty.wait(g),
        }
    }

    /// Waits for the slot to be empty, lets `fill` write the payload and
    /// marks the slot full.
    pub fn produce_with<R>(&self, fill: impl FnOnce(&mut T) -> R) -> Result<R, ChannelError> {
        let mut g = self.lock(true);
        while g.count == 1 && !g.closed {
            self.wait(&mut g, true);
        }
        if g.closed {
            self.unlock(g);
            return Err(ChannelError::Closed);
        }
        let r = fill(&mut g.value);
        g.count = 1;
        debug_assert!(g.count <= 1, "handshake count out of range");
        self.not_empty.notify_one();
        self.woke(false);
        self.unlock(g);
        Ok(r)
    }

    /// Waits for the slot to be full, lets `drain` read the payload and
    /// marks the slot empty. `drain` finishes before the slot is released.
    pub fn consume_with<R>(&self, drain: impl FnOnce(&mut T) -> R) -> Result<R, ChannelError> {
        let mut g = self.lock(false);
        while g.count == 0 && !g.closed {
            self.wait(&mut g, false);
        }
        if g.closed {
            self.unlock(g);
            return Err(ChannelError::Closed);
        }
        let r = drain(&mut g.value);
        g.count = 0;
        self.not_full.notify_one();
        self.woke(true);
        self.unlock(g);
        Ok(r)
    }

    /// Like [`consume_with`](Self::consume_with) but returns `None` instead
    /// of blocking when the slot is empty.
    pub fn try_consume_with<R>(&self, drain: impl FnOnce(&mut T) -> R) -> Result<Option<R>, ChannelError> {
        let mut g = self.lock(false);
        if g.closed {
            self.unlock(g);
            return Err(ChannelError::Closed);
        }
        if g.count == 0 {
            self.unlock(g);
            return Ok(None);
        }
        let r = drain(&mut g.value);
        g.count = 0;
        self.not_full.notify_one();
        self.woke(true);
        self.unlock(g);
        Ok(Some(r))
    }

    pub fn produce(&self) -> Result<(), ChannelError> {
        self.produce_with(|_| ())
    }

    pub fn consume(&self) -> Result<(), ChannelError> {
        self.consume_with(|_| ())
    }

    pub fn count(&self) -> u8 {
        self.slot.lock().count
    }

    pub fn close(&self) {
        let mut g = self.slot.lock();
        g.closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.slot.lock().closed
    }
}

struct Ring {
    slots: Vec<GradientMsg>,
    cnt: usize,
    fill_ptr: usize,
    use_ptr: usize,
    closed: bool,
}

/// Fixed-capacity single-producer single-consumer ring of gradients.
pub struct GradientQueue {
    ring: Mutex<Ring>,
    not_full: Condvar,
    depth: usize,
    origin: Instant,
    /// Nanoseconds since `origin` at which the producer took the guard, plus
    /// one; zero while the producer does not hold it.
    producer_held_since: AtomicU64,
    probe: Option<Probe>,
}

impl GradientQueue {
    /// A queue of `depth` slots, each preallocated for `dim` values.
    pub fn new(depth: usize, dim: usize) -> Self {
        assert!(depth >= 1, "queue depth must be at least 1");
        GradientQueue {
            ring: Mutex::new(Ring {
                slots: (0..depth).map(|_| GradientMsg::zeros(dim, 0)).collect(),
                cnt: 0,
                fill_ptr: 0,
                use_ptr: 0,
                closed: false,
            }),
            not_full: Condvar::new(),
            depth,
            origin: Instant::now(),
            producer_held_since: AtomicU64::new(0),
            probe: None,
        }
    }

    pub fn instrumented(depth: usize, dim: usize, monitor: Arc<WaitMonitor>, guard: &str, producer: &str, consumer: &str) -> Self {
        GradientQueue {
            probe: Some(Probe {
                monitor,
                guard: guard.into(),
                producer: producer.into(),
                consumer: consumer.into(),
            }),
            ..Self::new(depth, dim)
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.ring.lock().cnt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close(&self) {
        let mut g = self.ring.lock();
        g.closed = true;
        self.not_full.notify_all();
    }

    /// How long the producer has held the guard, if it holds it now.
    pub fn producer_hold_time(&self) -> Option<std::time::Duration> {
        match self.producer_held_since.load(Ordering::Relaxed) {
            0 => None,
            t => {
                let now = self.origin.elapsed().as_nanos() as u64;
                Some(std::time::Duration::from_nanos(now.saturating_sub(t - 1)))
            }
        }
    }

    fn lock_as_producer(&self) -> MutexGuard<'_, Ring> {
        let g = match &self.probe {
            Some(p) => {
                p.monitor.acquiring(&p.producer, &p.guard);
                let g = self.ring.lock();
                WaitMonitor::acquired(&p.guard);
                g
            }
            None => self.ring.lock(),
        };
        self.producer_held_since
            .store(self.origin.elapsed().as_nanos() as u64 + 1, Ordering::Relaxed);
        g
    }

    fn unlock_as_producer(&self, g: MutexGuard<'_, Ring>) {
        self.producer_held_since.store(0, Ordering::Relaxed);
        drop(g);
        if let Some(p) = &self.probe {
            WaitMonitor::released(&p.guard);
        }
    }

    fn wait_not_full(&self, g: &mut MutexGuard<'_, Ring>) {
        self.producer_held_since.store(0, Ordering::Relaxed);
        match &self.probe {
            Some(p) => {
                WaitMonitor::released(&p.guard);
                p.monitor.begin_wait(&p.producer, &p.consumer);
                self.not_full.wait(g);
                p.monitor.end_wait(&p.producer);
                WaitMonitor::acquired(&p.guard);
            }
            None => self.not_full.wait(g),
        }
        self.producer_held_since
            .store(self.origin.elapsed().as_nanos() as u64 + 1, Ordering::Relaxed);
    }

    /// Copies `msg` into the slot at `fill_ptr`, blocking while the ring is
    /// full. `midway` runs with the guard held after half of the payload has
    /// been written; returning `false` abandons the message, which then never
    /// becomes visible to the consumer.
    pub fn enqueue_copy(&self, msg: &GradientMsg, midway: impl FnOnce() -> bool) -> Result<(), ChannelError> {
        let mut g = self.lock_as_producer();
        while g.cnt == self.depth && !g.closed {
            self.wait_not_full(&mut g);
        }
        if g.closed {
            self.unlock_as_producer(g);
            return Err(ChannelError::Closed);
        }
        let fill = g.fill_ptr;
        let slot = &mut g.slots[fill];
        let half = msg.values.len() / 2;
        slot.values.clear();
        slot.values.extend_from_slice(&msg.values[..half]);
        if !midway() {
            self.unlock_as_producer(g);
            return Err(ChannelError::Abandoned);
        }
        slot.values.extend_from_slice(&msg.values[half..]);
        slot.learner_id = msg.learner_id;
        slot.seq_no = msg.seq_no;
        slot.basis_timestamp = msg.basis_timestamp;
        g.fill_ptr = (fill + 1) % self.depth;
        g.cnt += 1;
        debug_assert!(g.cnt <= self.depth, "queue count above depth");
        self.unlock_as_producer(g);
        Ok(())
    }

    pub fn enqueue(&self, msg: &GradientMsg) -> Result<(), ChannelError> {
        self.enqueue_copy(msg, || true)
    }

    /// Removes the oldest message by swapping it with `out`. Never blocks on
    /// an empty queue.
    pub fn try_dequeue_into(&self, out: &mut GradientMsg) -> bool {
        let mut g = self.ring.lock();
        if g.cnt == 0 {
            return false;
        }
        let at = g.use_ptr;
        std::mem::swap(&mut g.slots[at], out);
        g.use_ptr = (at + 1) % self.depth;
        g.cnt -= 1;
        debug_assert!(g.cnt < self.depth, "queue count out of range");
        self.not_full.notify_one();
        if let Some(p) = &self.probe {
            p.monitor.woke(&p.producer, &p.consumer);
        }
        true
    }

    pub fn try_dequeue(&self) -> Option<GradientMsg> {
        let mut out = GradientMsg::zeros(0, 0);
        self.try_dequeue_into(&mut out).then_some(out)
    }
}
