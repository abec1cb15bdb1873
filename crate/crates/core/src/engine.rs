//! Run lifecycle: build the PS and the learners, start their threads,
//! collect metrics, and join or tear everything down.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::analysis::{RunMetrics, StalenessHistogram};
use crate::channels::GradientQueue;
use crate::error::{Error, Result};
use crate::learner::{KillKind, Learner, LearnerConfig, LearnerControl, LearnerStatus, ThreadExit};
use crate::metrics::{EpochRecord, METRICS_SCHEMA};
use crate::models::{evaluate, Dataset, GradientProvider, Sharding};
use crate::monitor::WaitMonitor;
use crate::resilience::Checkpoint;
use crate::server::{ps_run, ApplyEvent, ApplyOptions, Jitter, PsReport, ServerConfig, ServerState};
use crate::types::{HyperParams, Mode, WeightStore};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub hp: HyperParams,
    pub seed: u64,
    /// Single learner in ASGD, blocking pulls, no timing fields in the
    /// metrics: the only bit-reproducible configuration.
    pub deterministic: bool,
    pub compute_delay: Option<Duration>,
    pub apply_lanes: usize,
    pub unroll: usize,
    pub record_seq: bool,
    pub jitter: Option<Jitter>,
    /// Instrument the channels with a [`WaitMonitor`].
    pub monitor: bool,
    pub check_finite: bool,
    /// Evaluate loss and accuracy at every epoch boundary.
    pub evaluate: bool,
    pub max_poll_pause: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            hp: HyperParams::default(),
            seed: 0,
            deterministic: false,
            compute_delay: None,
            apply_lanes: 4,
            unroll: 8,
            record_seq: false,
            jitter: None,
            monitor: false,
            check_finite: cfg!(debug_assertions),
            evaluate: true,
            max_poll_pause: Duration::from_millis(1),
        }
    }
}

impl EngineConfig {
    /// The configuration actually run: deterministic ASGD is forced down to
    /// one learner.
    pub fn effective(&self) -> EngineConfig {
        let mut c = self.clone();
        if c.deterministic && c.hp.mode == Mode::Asgd && c.hp.learners != 1 {
            log::warn!(
                "deterministic mode runs ASGD with 1 learner instead of {}",
                c.hp.learners
            );
            c.hp.learners = 1;
        }
        c
    }

    fn sync_pull(&self) -> bool {
        self.deterministic || self.hp.mode == Mode::Ssgd
    }

    pub fn sharding(&self, data: &Dataset) -> Sharding {
        Sharding::new(data.samples, self.hp.mini_batch, self.hp.learners)
    }

    /// Weight updates that make up one epoch.
    pub fn updates_per_epoch(&self, data: &Dataset) -> u64 {
        let b = self.sharding(data).batches_per_epoch() as u64;
        match self.hp.mode {
            Mode::Asgd => b,
            Mode::Ssgd => b / self.hp.learners as u64,
        }
    }

    /// Gradients the learners produce over the whole run.
    pub fn total_gradients(&self, data: &Dataset) -> u64 {
        self.hp.epochs as u64 * self.sharding(data).batches_per_epoch() as u64
    }
}

/// Where and how often the PS checkpoints.
#[derive(Debug)]
pub struct CheckpointSink {
    /// Weight updates between checkpoints.
    pub interval: u64,
    pub path: Option<PathBuf>,
    latest: Mutex<Option<Checkpoint>>,
    pub written: AtomicU64,
    pub failures: AtomicU64,
}

impl CheckpointSink {
    pub fn new(interval: u64, path: Option<PathBuf>) -> Self {
        CheckpointSink {
            interval: interval.max(1),
            path,
            latest: Mutex::new(None),
            written: AtomicU64::new(0),
            failures: AtomicU64::new(0),
        }
    }

    pub fn latest(&self) -> Option<Checkpoint> {
        self.latest.lock().clone()
    }

    fn store(&self, c: Checkpoint) {
        if let Some(p) = &self.path {
            match c.save(p) {
                Ok(()) => {
                    self.written.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    self.failures.fetch_add(1, Ordering::Relaxed);
                    log::warn!("checkpoint write failed, keeping it in memory: {e}");
                }
            }
        }
        *self.latest.lock() = Some(c);
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LearnerSummary {
    pub status: LearnerStatus,
    /// First batch index of this launch.
    pub start: u64,
    pub enqueued: u64,
    pub pulls: u64,
    pub pull_polls: u64,
    pub bytes_pushed: u64,
    pub bytes_pulled: u64,
}

fn summarize(l: &Learner) -> LearnerSummary {
    let c = &l.control;
    LearnerSummary {
        status: c.status(),
        start: l.config.start,
        enqueued: c.enqueued.load(Ordering::Acquire),
        pulls: c.pulls.load(Ordering::Acquire),
        pull_polls: c.pull_polls.load(Ordering::Acquire),
        bytes_pushed: c.bytes_pushed.load(Ordering::Acquire),
        bytes_pulled: c.bytes_pulled.load(Ordering::Acquire),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub weights: Vec<f32>,
    pub timestamp: u64,
    pub ps: PsReport,
    pub learners: Vec<LearnerSummary>,
    pub records: Vec<EpochRecord>,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub metrics: RunMetrics,
    pub monitor: Option<Arc<WaitMonitor>>,
}

impl RunOutcome {
    pub fn bytes_pulled(&self) -> u64 {
        self.learners.iter().map(|l| l.bytes_pulled).sum()
    }

    pub fn pull_polls(&self) -> u64 {
        self.learners.iter().map(|l| l.pull_polls).sum()
    }

    pub fn all_dead(&self) -> bool {
        self.learners.iter().all(|l| l.status == LearnerStatus::Dead)
    }
}

/// What was left of a run after [`RunHandle::teardown`].
#[derive(Debug, Clone)]
pub struct TornDown {
    pub learners: Vec<LearnerSummary>,
    pub records: Vec<EpochRecord>,
    pub timestamp: u64,
}

struct Shared {
    server: Arc<ServerState>,
    learners: Vec<Arc<Learner>>,
}

impl Shared {
    fn shutdown(&self) {
        // Zombies first, then the queues: a push thread waiting for queue
        // space holds its handshake guard until the queue lets it go.
        self.server.request_abort();
        for l in &self.learners {
            l.control.release_zombie();
        }
        for q in &self.server.queues {
            q.close();
        }
        for l in &self.learners {
            l.shut();
        }
    }
}

struct ShutdownOnPanic<'a>(&'a Shared);

impl Drop for ShutdownOnPanic<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            self.0.shutdown();
        }
    }
}

struct Snapshot {
    epoch: usize,
    weights: Vec<f32>,
    applied: u64,
    staleness: StalenessHistogram,
    bytes: u64,
    wall_s: f64,
}

/// A launched run.
pub struct RunHandle {
    shared: Arc<Shared>,
    config: EngineConfig,
    provider: Arc<dyn GradientProvider>,
    data: Arc<Dataset>,
    monitor: Option<Arc<WaitMonitor>>,
    started: Instant,
    ps: JoinHandle<Result<PsReport>>,
    controller: JoinHandle<Vec<[ThreadExit; 3]>>,
    evaluator: JoinHandle<Result<Vec<EpochRecord>>>,
}

/// Builds and starts a run, optionally resuming from a checkpoint.
pub fn launch(
    config: &EngineConfig,
    provider: Arc<dyn GradientProvider>,
    data: Arc<Dataset>,
    resume: Option<&Checkpoint>,
    checkpoints: Option<Arc<CheckpointSink>>,
) -> Result<RunHandle> {
    launch_with_dead(config, provider, data, resume, checkpoints, &[])
}

/// Like [`launch`], with the learners in `dead` soft-killed before any of
/// their threads start.
pub fn launch_with_dead(
    config: &EngineConfig,
    provider: Arc<dyn GradientProvider>,
    data: Arc<Dataset>,
    resume: Option<&Checkpoint>,
    checkpoints: Option<Arc<CheckpointSink>>,
    dead: &[usize],
) -> Result<RunHandle> {
    let cfg = config.effective();
    let hp = &cfg.hp;
    hp.validate()?;
    if hp.mini_batch > data.samples {
        return Err(Error::Config(format!(
            "mini_batch {} exceeds the {} samples",
            hp.mini_batch, data.samples
        )));
    }
    if hp.mode == Mode::Ssgd && !data.samples.is_multiple_of(hp.learners * hp.mini_batch) {
        return Err(Error::Config(format!(
            "ssgd needs learners x mini_batch = {} to divide the {} samples",
            hp.learners * hp.mini_batch,
            data.samples
        )));
    }
    let lam = hp.learners;
    let dim = provider.dim();
    let sharding = cfg.sharding(&data);
    let weights = Arc::new(WeightStore::new(&provider.initial_weights(cfg.seed)));
    let mut starts = vec![0u64; lam];
    if let Some(c) = resume {
        c.check_compatible(hp, dim)?;
        weights.restore(&c.weights, c.timestamp)?;
        starts = c.consumed(&sharding);
    }

    let monitor = cfg.monitor.then(WaitMonitor::new);
    let queues: Vec<Arc<GradientQueue>> = (0..lam)
        .map(|l| {
            Arc::new(match &monitor {
                Some(m) => GradientQueue::instrumented(
                    hp.queue_depth,
                    dim,
                    m.clone(),
                    &format!("queue[{l}]"),
                    &format!("push[{l}]"),
                    "ps",
                ),
                None => GradientQueue::new(hp.queue_depth, dim),
            })
        })
        .collect();
    let mut scfg = ServerConfig::from_hyper(hp);
    scfg.apply = ApplyOptions {
        guard: hp.update_guard,
        lanes: cfg.apply_lanes.max(1),
        unroll: cfg.unroll,
    };
    scfg.check_finite = cfg.check_finite;
    scfg.record_seq = cfg.record_seq;
    scfg.jitter = cfg.jitter;
    let server = Arc::new(ServerState::new(weights.clone(), queues.clone(), scfg));
    if let Some(c) = resume {
        server.resume_counters(c.applied, &starts);
    }

    let learners: Vec<Arc<Learner>> = (0..lam)
        .map(|l| {
            Arc::new(Learner::new(
                LearnerConfig {
                    id: l,
                    sharding,
                    epochs: hp.epochs,
                    seed: cfg.seed,
                    start: starts[l],
                    sync_pull: cfg.sync_pull(),
                    guard: hp.update_guard,
                    compute_delay: cfg.compute_delay,
                    max_poll_pause: cfg.max_poll_pause,
                },
                queues[l].clone(),
                weights.clone(),
                provider.clone(),
                data.clone(),
                monitor.clone(),
            ))
        })
        .collect();
    let shared = Arc::new(Shared {
        server: server.clone(),
        learners: learners.clone(),
    });
    for &l in dead {
        if let Some(l) = learners.get(l) {
            l.kill(KillKind::Soft);
        }
    }
    let started = Instant::now();

    let (tx, rx) = mpsc::channel::<Snapshot>();
    let evaluator = {
        let (provider, data, shared) = (provider.clone(), data.clone(), shared.clone());
        let deterministic = cfg.deterministic;
        thread::Builder::new().name("evaluator".into()).spawn(move || {
            let mut out = Vec::new();
            for s in rx {
                let (loss, accuracy) = evaluate(provider.as_ref(), &s.weights, &data);
                if !loss.is_finite() {
                    shared.shutdown();
                    return Err(Error::Divergence { epoch: s.epoch });
                }
                out.push(EpochRecord {
                    schema: METRICS_SCHEMA,
                    epoch: s.epoch,
                    loss,
                    accuracy,
                    wall_s: (!deterministic).then_some(s.wall_s),
                    staleness_max: s.staleness.max(),
                    staleness_mean: s.staleness.mean(),
                    bytes_moved: (!deterministic).then_some(s.bytes),
                    applied: s.applied,
                });
            }
            Ok(out)
        })?
    };

    let mut threads = Vec::with_capacity(lam);
    for l in &learners {
        match l.spawn() {
            Ok(t) => threads.push(t),
            Err(e) => {
                shared.shutdown();
                drop(tx);
                for t in threads {
                    t.join();
                }
                return Err(e.into());
            }
        }
    }

    let ps = {
        let shared = shared.clone();
        let controls: Vec<Arc<LearnerControl>> = learners.iter().map(|l| l.control.clone()).collect();
        let per_epoch = cfg.updates_per_epoch(&data).max(1);
        let evaluate = cfg.evaluate;
        let epochs = cfg.hp.epochs;
        thread::Builder::new().name("ps".into()).spawn(move || {
            let _g = ShutdownOnPanic(&shared);
            let server = &shared.server;
            let mut interval = StalenessHistogram::default();
            let mut next_epoch = server.weights.timestamp() / per_epoch + 1;
            let mut observer = |st: &ServerState, ev: &ApplyEvent<'_>| -> Result<()> {
                for s in ev.staleness {
                    interval.add(*s);
                }
                if let Some(sink) = &checkpoints {
                    if ev.timestamp.is_multiple_of(sink.interval) {
                        sink.store(Checkpoint::capture(st, &sharding, epochs));
                    }
                }
                if ev.timestamp >= next_epoch * per_epoch {
                    if evaluate {
                        let bytes = controls
                            .iter()
                            .map(|c| c.bytes_pushed.load(Ordering::Relaxed) + c.bytes_pulled.load(Ordering::Relaxed))
                            .sum();
                        let _ = tx.send(Snapshot {
                            epoch: next_epoch as usize,
                            weights: st.weights.snapshot(),
                            applied: ev.timestamp,
                            staleness: std::mem::take(&mut interval),
                            bytes,
                            wall_s: started.elapsed().as_secs_f64(),
                        });
                    } else {
                        interval = StalenessHistogram::default();
                    }
                    next_epoch += 1;
                }
                Ok(())
            };
            let r = ps_run(server, &mut observer);
            if r.is_err() {
                shared.shutdown();
            }
            r
        })?
    };

    let controller = {
        let server = server.clone();
        thread::Builder::new().name("controller".into()).spawn(move || {
            let exits: Vec<[ThreadExit; 3]> = threads.into_iter().map(|t| t.join()).collect();
            server.request_stop();
            exits
        })?
    };

    Ok(RunHandle {
        shared,
        config: cfg,
        provider,
        data,
        monitor,
        started,
        ps,
        controller,
        evaluator,
    })
}

impl RunHandle {
    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn progress(&self) -> u64 {
        self.shared.server.progress()
    }

    pub fn timestamp(&self) -> u64 {
        self.shared.server.weights.timestamp()
    }

    pub fn learners(&self) -> usize {
        self.shared.learners.len()
    }

    pub fn learner_status(&self, l: usize) -> LearnerStatus {
        self.shared.learners[l].control.status()
    }

    /// Whether the PS thread has exited.
    pub fn is_finished(&self) -> bool {
        self.ps.is_finished()
    }

    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub fn kill(&self, learner: usize, kind: KillKind) {
        if let Some(l) = self.shared.learners.get(learner) {
            l.kill(kind);
        }
    }

    /// Longest time any push thread has currently held its queue guard.
    pub fn longest_guard_hold(&self) -> Option<(usize, Duration)> {
        self.shared
            .server
            .queues
            .iter()
            .enumerate()
            .filter_map(|(i, q)| q.producer_hold_time().map(|d| (i, d)))
            .max_by_key(|(_, d)| *d)
    }

    /// Stops every thread without waiting for the work to finish.
    pub fn teardown(self) -> TornDown {
        self.shared.shutdown();
        let _ = self.ps.join();
        let _ = self.controller.join();
        let records = self.evaluator.join().ok().and_then(|r| r.ok()).unwrap_or_default();
        TornDown {
            learners: self.shared.learners.iter().map(|l| summarize(l)).collect(),
            records,
            timestamp: self.shared.server.weights.timestamp(),
        }
    }

    /// Waits for the run to finish.
    pub fn join(self) -> Result<RunOutcome> {
        let ps = self
            .ps
            .join()
            .map_err(|_| Error::Run("parameter server thread panicked".into()))?;
        let ps = match ps {
            Ok(r) => r,
            Err(e) => {
                let _ = self.controller.join();
                let _ = self.evaluator.join();
                return Err(e);
            }
        };
        self.controller
            .join()
            .map_err(|_| Error::Run("controller thread panicked".into()))?;
        let mut records = self
            .evaluator
            .join()
            .map_err(|_| Error::Run("evaluator thread panicked".into()))??;
        let server = &self.shared.server;
        let weights = server.weights.snapshot();
        let timestamp = server.weights.timestamp();
        let wall = self.started.elapsed();
        let (final_loss, final_accuracy) = evaluate(self.provider.as_ref(), &weights, &self.data);
        let learners: Vec<LearnerSummary> = self.shared.learners.iter().map(|l| summarize(l)).collect();
        let bytes: u64 = learners.iter().map(|l| l.bytes_pushed + l.bytes_pulled).sum();
        if self.config.evaluate && records.last().is_none_or(|r| r.applied != timestamp) {
            if !final_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: records.last().map_or(0, |r| r.epoch),
                });
            }
            let per_epoch = self.config.updates_per_epoch(&self.data).max(1);
            let det = self.config.deterministic;
            records.push(EpochRecord {
                schema: METRICS_SCHEMA,
                epoch: timestamp.div_ceil(per_epoch) as usize,
                loss: final_loss,
                accuracy: final_accuracy,
                wall_s: (!det).then_some(wall.as_secs_f64()),
                staleness_max: None,
                staleness_mean: None,
                bytes_moved: (!det).then_some(bytes),
                applied: timestamp,
            });
        }
        let metrics = RunMetrics {
            learners: self.shared.learners.iter().map(|l| l.control.times()).collect(),
            t_receive: ps.t_receive,
            t_apply: ps.t_apply,
            bytes_moved: bytes,
            wall_time: wall,
            speedup: None,
        };
        Ok(RunOutcome {
            weights,
            timestamp,
            ps,
            learners,
            records,
            final_loss,
            final_accuracy,
            metrics,
            monitor: self.monitor,
        })
    }
}

/// Launches a run and waits for it.
pub fn run(config: &EngineConfig, provider: Arc<dyn GradientProvider>, data: Arc<Dataset>) -> Result<RunOutcome> {
    launch(config, provider, data, None, None)?.join()
}
