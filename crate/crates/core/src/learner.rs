//! A learner is three threads: training, push and pull, joined by two
//! one-slot handshakes.
//!
//! * training computes mini-batch gradients on its local weights and hands
//!   each one to the push thread through the gradient staging buffer;
//! * push moves staged gradients into the learner's queue to the PS;
//! * pull copies the PS weights into the weight staging buffer whenever the
//!   PS timestamp has moved since the last copy.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::analysis::LearnerTimes;
use crate::channels::{GradientQueue, SlotHandshake};
use crate::models::{sample_order, widen, Dataset, GradientProvider, Sharding};
use crate::monitor::WaitMonitor;
use crate::types::{GradientMsg, UpdateGuard, WeightStore};

/// Weight staging buffer: a copy of the PS weights and the timestamp read
/// just before the copy started.
#[derive(Debug, Clone)]
pub struct WeightCopy {
    pub values: Vec<f32>,
    pub basis_timestamp: u64,
}

/// Marks the learner dead and wakes its other threads if one of them
/// panics, so they do not wait forever on a peer that is gone.
struct DieOnPanic<'a>(&'a Learner);

impl Drop for DieOnPanic<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            self.0.die();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillKind {
    /// The learner's threads stop at their next kill point.
    Soft,
    /// The push thread stops in the middle of its next queue write and
    /// keeps the queue guard until it is reaped.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerStatus {
    Running,
    Finished,
    Dead,
}

const RUNNING: u8 = 0;
const FINISHED: u8 = 1;
const DEAD: u8 = 2;

const NO_KILL: u8 = 0;
const SOFT: u8 = 1;
const HARD: u8 = 2;

/// Shared status, kill switch and counters of one learner.
#[derive(Debug, Default)]
pub struct LearnerControl {
    status: AtomicU8,
    kill: AtomicU8,
    released: AtomicBool,
    training_done: AtomicBool,
    zombie: Mutex<Option<thread::Thread>>,
    /// Completed enqueues.
    pub enqueued: AtomicU64,
    pub pull_polls: AtomicU64,
    pub pulls: AtomicU64,
    pub bytes_pushed: AtomicU64,
    pub bytes_pulled: AtomicU64,
    t_train_ns: AtomicU64,
    t_push_ns: AtomicU64,
    t_pull_ns: AtomicU64,
}

impl LearnerControl {
    pub fn status(&self) -> LearnerStatus {
        match self.status.load(Ordering::Acquire) {
            RUNNING => LearnerStatus::Running,
            FINISHED => LearnerStatus::Finished,
            _ => LearnerStatus::Dead,
        }
    }

    fn mark_dead(&self) {
        let _ = self
            .status
            .compare_exchange(RUNNING, DEAD, Ordering::AcqRel, Ordering::Acquire);
    }

    fn soft_killed(&self) -> bool {
        self.kill.load(Ordering::Acquire) == SOFT
    }

    pub fn times(&self) -> LearnerTimes {
        let d = |a: &AtomicU64| Duration::from_nanos(a.load(Ordering::Acquire));
        LearnerTimes {
            t_train: d(&self.t_train_ns),
            t_push: d(&self.t_push_ns),
            t_pull: d(&self.t_pull_ns),
        }
    }

    /// Lets a hard-killed push thread drop its guard and exit.
    pub fn release_zombie(&self) {
        self.released.store(true, Ordering::Release);
        if let Some(t) = self.zombie.lock().as_ref() {
            t.unpark();
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub id: usize,
    pub sharding: Sharding,
    pub epochs: usize,
    pub seed: u64,
    /// Index of the first batch to compute (non-zero when resuming).
    pub start: u64,
    /// Wait for a fresh weight copy before every batch after the first.
    pub sync_pull: bool,
    pub guard: UpdateGuard,
    /// Sleep added to every gradient computation to emulate device time.
    pub compute_delay: Option<Duration>,
    /// Longest pause between two polls of an unchanged PS timestamp.
    pub max_poll_pause: Duration,
}

impl LearnerConfig {
    pub fn total_batches(&self) -> u64 {
        self.epochs as u64 * self.sharding.learner_batches_per_epoch(self.id) as u64
    }
}

pub struct Learner {
    pub config: LearnerConfig,
    pub control: Arc<LearnerControl>,
    pub push_hs: SlotHandshake<GradientMsg>,
    pub pull_hs: SlotHandshake<WeightCopy>,
    pub queue: Arc<GradientQueue>,
    weights: Arc<WeightStore>,
    provider: Arc<dyn GradientProvider>,
    data: Arc<Dataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadExit {
    Finished,
    Killed,
    Closed,
}

pub struct LearnerThreads {
    pub train: JoinHandle<ThreadExit>,
    pub push: JoinHandle<ThreadExit>,
    pub pull: JoinHandle<ThreadExit>,
}

impl LearnerThreads {
    pub fn join(self) -> [ThreadExit; 3] {
        let j = |h: JoinHandle<ThreadExit>| h.join().unwrap_or(ThreadExit::Killed);
        [j(self.train), j(self.push), j(self.pull)]
    }
}

impl Learner {
    pub fn new(
        config: LearnerConfig,
        queue: Arc<GradientQueue>,
        weights: Arc<WeightStore>,
        provider: Arc<dyn GradientProvider>,
        data: Arc<Dataset>,
        monitor: Option<Arc<WaitMonitor>>,
    ) -> Self {
        let dim = weights.len();
        let id = config.id;
        let staged = GradientMsg::zeros(dim, id);
        let copy = WeightCopy {
            values: vec![0.0; dim],
            basis_timestamp: 0,
        };
        let (push_hs, pull_hs) = match monitor {
            Some(m) => (
                SlotHandshake::instrumented(
                    staged,
                    m.clone(),
                    &format!("push_hs[{id}]"),
                    &format!("train[{id}]"),
                    &format!("push[{id}]"),
                ),
                SlotHandshake::instrumented(
                    copy,
                    m,
                    &format!("pull_hs[{id}]"),
                    &format!("pull[{id}]"),
                    &format!("train[{id}]"),
                ),
            ),
            None => (SlotHandshake::new(staged), SlotHandshake::new(copy)),
        };
        Learner {
            config,
            control: Arc::new(LearnerControl::default()),
            push_hs,
            pull_hs,
            queue,
            weights,
            provider,
            data,
        }
    }

    /// Requests the learner's death.
    pub fn kill(&self, kind: KillKind) {
        match kind {
            KillKind::Soft => {
                self.control.kill.store(SOFT, Ordering::Release);
                self.push_hs.close();
                self.pull_hs.close();
            }
            KillKind::Hard => self.control.kill.store(HARD, Ordering::Release),
        }
    }

    /// Wakes every thread of this learner for teardown.
    pub fn shut(&self) {
        self.control.release_zombie();
        self.push_hs.close();
        self.pull_hs.close();
    }

    pub fn spawn(self: &Arc<Self>) -> std::io::Result<LearnerThreads> {
        let id = self.config.id;
        let (a, b, c) = (self.clone(), self.clone(), self.clone());
        Ok(LearnerThreads {
            train: thread::Builder::new()
                .name(format!("train-{id}"))
                .spawn(move || a.training_loop())?,
            push: thread::Builder::new()
                .name(format!("push-{id}"))
                .spawn(move || b.push_loop())?,
            pull: thread::Builder::new()
                .name(format!("pull-{id}"))
                .spawn(move || c.pull_loop())?,
        })
    }

    fn read_weights(&self, out: &mut [f32]) -> u64 {
        match self.config.guard {
            UpdateGuard::Locked => {
                let _r = self.weights.guard().read();
                let ts = self.weights.timestamp();
                self.weights.copy_into(out);
                ts
            }
            UpdateGuard::Lockfree => {
                let ts = self.weights.timestamp();
                self.weights.copy_into(out);
                ts
            }
        }
    }

    fn die(&self) -> ThreadExit {
        self.control.mark_dead();
        self.push_hs.close();
        self.pull_hs.close();
        ThreadExit::Killed
    }

    /// Computes this learner's share of `epochs` epochs, one gradient per
    /// mini-batch, and hands each to the push thread.
    pub fn training_loop(&self) -> ThreadExit {
        let _g = DieOnPanic(self);
        let exit = self.train_inner();
        self.control.training_done.store(true, Ordering::Release);
        // Unblocks a pull thread waiting to hand over a copy nobody will read.
        self.pull_hs.close();
        exit
    }

    fn train_inner(&self) -> ThreadExit {
        let cfg = &self.config;
        let ctl = &self.control;
        let dim = self.weights.len();
        let total = cfg.total_batches();
        let mut local = vec![0.0f32; dim];
        let mut basis = self.read_weights(&mut local);
        let mut theta = Vec::with_capacity(dim);
        let mut grad = vec![0.0f64; dim];
        let mut order: Vec<usize> = Vec::new();
        let mut order_epoch = usize::MAX;
        let mut busy = Duration::ZERO;
        for k in cfg.start..total {
            if ctl.soft_killed() {
                return self.die();
            }
            // A copy read before this thread's own initial read can be older
            // than the weights in use; it is dropped.
            let mut adopt = |c: &mut WeightCopy| {
                (c.basis_timestamp > basis).then(|| {
                    local.copy_from_slice(&c.values);
                    c.basis_timestamp
                })
            };
            let fresh = if cfg.sync_pull && k > cfg.start {
                // The PS has not moved past `basis` until this learner's
                // last gradient is in, so the first newer copy is the one.
                loop {
                    match self.pull_hs.consume_with(&mut adopt) {
                        Ok(Some(ts)) => break Some(ts),
                        Ok(None) => continue,
                        Err(_) => return self.closed_or_killed(),
                    }
                }
            } else if !cfg.sync_pull {
                match self.pull_hs.try_consume_with(&mut adopt) {
                    Ok(ts) => ts.flatten(),
                    Err(_) => return self.closed_or_killed(),
                }
            } else {
                None
            };
            if let Some(ts) = fresh {
                basis = ts;
            }

            let t0 = Instant::now();
            let (epoch, b) = cfg.sharding.locate(cfg.id, k);
            if epoch != order_epoch {
                order = sample_order(self.data.samples, cfg.seed, epoch);
                order_epoch = epoch;
            }
            let batch = &order[cfg.sharding.batch_range(b)];
            widen(&local, &mut theta);
            self.provider.gradient(&theta, &self.data, batch, &mut grad);
            if let Some(d) = cfg.compute_delay {
                thread::sleep(d);
            }
            busy += t0.elapsed();

            if ctl.soft_killed() {
                return self.die();
            }
            let staged = self.push_hs.produce_with(|m| {
                for (s, g) in m.values.iter_mut().zip(&grad) {
                    *s = *g as f32;
                }
                m.learner_id = cfg.id;
                m.seq_no = k;
                m.basis_timestamp = basis;
            });
            if staged.is_err() {
                ctl.t_train_ns.store(busy.as_nanos() as u64, Ordering::Release);
                return self.closed_or_killed();
            }
        }
        ctl.t_train_ns.store(busy.as_nanos() as u64, Ordering::Release);
        ThreadExit::Finished
    }

    fn closed_or_killed(&self) -> ThreadExit {
        if self.control.kill.load(Ordering::Acquire) != NO_KILL {
            self.die()
        } else {
            ThreadExit::Closed
        }
    }

    /// Moves every staged gradient into the PS queue. The staging buffer is
    /// released only after the queue copy has finished.
    pub fn push_loop(&self) -> ThreadExit {
        let _g = DieOnPanic(self);
        let cfg = &self.config;
        let ctl = &self.control;
        let bytes = (self.weights.len() * 4) as u64;
        let mut busy = Duration::ZERO;
        let mut exit = ThreadExit::Finished;
        for _ in cfg.start..cfg.total_batches() {
            if ctl.soft_killed() {
                exit = self.die();
                break;
            }
            let r = self.push_hs.consume_with(|staged| {
                let t0 = Instant::now();
                let r = self.queue.enqueue_copy(staged, || self.midway());
                busy += t0.elapsed();
                r
            });
            match r {
                Ok(Ok(())) => {
                    ctl.enqueued.fetch_add(1, Ordering::AcqRel);
                    ctl.bytes_pushed.fetch_add(bytes, Ordering::Relaxed);
                }
                _ => {
                    exit = self.closed_or_killed();
                    break;
                }
            }
        }
        ctl.t_push_ns.store(busy.as_nanos() as u64, Ordering::Release);
        if exit == ThreadExit::Finished {
            let _ = ctl
                .status
                .compare_exchange(RUNNING, FINISHED, Ordering::AcqRel, Ordering::Acquire);
        }
        exit
    }

    /// Runs inside the queue's critical section. A hard kill parks the
    /// thread here, guard held, until the reaper releases it.
    fn midway(&self) -> bool {
        let ctl = &self.control;
        if ctl.kill.load(Ordering::Acquire) != HARD {
            return true;
        }
        *ctl.zombie.lock() = Some(thread::current());
        ctl.mark_dead();
        while !ctl.released.load(Ordering::Acquire) {
            thread::park_timeout(Duration::from_millis(50));
        }
        false
    }

    /// Copies the PS weights whenever the PS timestamp differs from the last
    /// copy's; polls of an unchanged timestamp copy nothing.
    pub fn pull_loop(&self) -> ThreadExit {
        let _g = DieOnPanic(self);
        let cfg = &self.config;
        let ctl = &self.control;
        let bytes = (self.weights.len() * 4) as u64;
        // Timestamp of the last copy handed over. Nothing has been handed
        // over yet, so the first poll always copies.
        let mut last = u64::MAX;
        let mut idle = 0u32;
        let mut busy = Duration::ZERO;
        let exit = loop {
            if ctl.training_done.load(Ordering::Acquire) {
                break ThreadExit::Finished;
            }
            if ctl.soft_killed() {
                break self.die();
            }
            ctl.pull_polls.fetch_add(1, Ordering::Relaxed);
            if self.weights.timestamp() == last {
                idle = idle.saturating_add(1);
                if idle < 64 {
                    thread::yield_now();
                } else {
                    let us = 20u64 << (idle - 64).min(6);
                    thread::sleep(Duration::from_micros(us).min(cfg.max_poll_pause));
                }
                continue;
            }
            idle = 0;
            let r = self.pull_hs.produce_with(|c| {
                let t0 = Instant::now();
                let ts = self.read_weights(&mut c.values);
                c.basis_timestamp = ts;
                busy += t0.elapsed();
                ts
            });
            match r {
                Ok(ts) => {
                    last = ts;
                    ctl.pulls.fetch_add(1, Ordering::Relaxed);
                    ctl.bytes_pulled.fetch_add(bytes, Ordering::Relaxed);
                }
                Err(_) => {
                    break if ctl.training_done.load(Ordering::Acquire) {
                        ThreadExit::Finished
                    } else {
                        self.closed_or_killed()
                    }
                }
            }
        };
        ctl.t_pull_ns.store(busy.as_nanos() as u64, Ordering::Release);
        exit
    }
}
