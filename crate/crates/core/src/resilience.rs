//! Checkpoints, the watchdog supervisor, fault injection and kill campaigns.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{launch_with_dead, CheckpointSink, EngineConfig, RunHandle, RunOutcome};
use crate::error::{Error, Result};
use crate::learner::{KillKind, LearnerStatus};
use crate::metrics::EpochRecord;
use crate::models::{evaluate, sgd_oracle, Dataset, GradientProvider, Sharding};
use crate::server::ServerState;
use crate::types::HyperParams;

const MAGIC: &[u8; 4] = b"PSCK";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4 + 4 + 8 + 8 + 8;

/// Position of a learner in its batch sequence: the next batch it has to
/// compute is global batch `batch` of epoch `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LearnerProgress {
    pub epoch: u32,
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub learners: u32,
    pub mini_batch: u32,
    pub learning_rate: f32,
    pub epochs: u32,
    pub timestamp: u64,
    /// Gradients consumed by the PS (applied plus discarded).
    pub applied: u64,
    pub progress: Vec<LearnerProgress>,
    pub weights: Vec<f32>,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    /// Reads the PS state. Must run on the PS thread between applies.
    pub fn capture(st: &ServerState, sharding: &Sharding, epochs: usize) -> Checkpoint {
        let progress = st
            .consumed_all()
            .iter()
            .enumerate()
            .map(|(l, &k)| {
                if sharding.learner_batches_per_epoch(l) == 0 {
                    LearnerProgress { epoch: 0, batch: l as u64 }
                } else {
                    let (e, b) = sharding.locate(l, k);
                    LearnerProgress {
                        epoch: e as u32,
                        batch: b as u64,
                    }
                }
            })
            .collect();
        Checkpoint {
            learners: sharding.learners as u32,
            mini_batch: sharding.mini_batch as u32,
            learning_rate: st.config.alpha,
            epochs: epochs as u32,
            timestamp: st.weights.timestamp(),
            applied: st.progress(),
            progress,
            weights: st.weights.snapshot(),
        }
    }

    /// Per-learner count of batches already consumed by the PS.
    pub fn consumed(&self, sharding: &Sharding) -> Vec<u64> {
        self.progress
            .iter()
            .enumerate()
            .map(|(l, p)| {
                let per = sharding.learner_batches_per_epoch(l) as u64;
                if per == 0 {
                    0
                } else {
                    p.epoch as u64 * per + (p.batch - l as u64) / sharding.learners as u64
                }
            })
            .collect()
    }

    pub fn check_compatible(&self, hp: &HyperParams, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("checkpoint does not match the run: {m}")));
        if self.learners as usize != hp.learners {
            return bad(format!("{} learners, run has {}", self.learners, hp.learners));
        }
        if self.mini_batch as usize != hp.mini_batch {
            return bad(format!("mini_batch {}, run has {}", self.mini_batch, hp.mini_batch));
        }
        if self.weights.len() != dim {
            return bad(format!("{} weights, model has {dim}", self.weights.len()));
        }
        if self.progress.len() != hp.learners {
            return bad(format!("{} progress entries", self.progress.len()));
        }
        if self.learning_rate != hp.learning_rate || self.epochs as usize != hp.epochs {
            log::warn!(
                "resuming a checkpoint taken with lr={} epochs={} under lr={} epochs={}",
                self.learning_rate,
                self.epochs,
                hp.learning_rate,
                hp.epochs
            );
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER_LEN + self.progress.len() * 12 + self.weights.len() * 4 + 4);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&0u16.to_le_bytes());
        b.extend_from_slice(&self.learners.to_le_bytes());
        b.extend_from_slice(&self.mini_batch.to_le_bytes());
        b.extend_from_slice(&self.learning_rate.to_le_bytes());
        b.extend_from_slice(&self.epochs.to_le_bytes());
        b.extend_from_slice(&self.timestamp.to_le_bytes());
        b.extend_from_slice(&self.applied.to_le_bytes());
        b.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for p in &self.progress {
            b.extend_from_slice(&p.epoch.to_le_bytes());
            b.extend_from_slice(&p.batch.to_le_bytes());
        }
        for w in &self.weights {
            b.extend_from_slice(&w.to_le_bytes());
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(ck_err(path, format!("truncated: {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(ck_err(path, "checksum mismatch"));
        }
        if &body[..4] != MAGIC {
            return Err(ck_err(path, "not a checkpoint file"));
        }
        let mut r = Reader { buf: body, at: 4 };
        let version = u16::from_le_bytes(r.take::<2>());
        if version != VERSION {
            return Err(ck_err(path, format!("unsupported version {version}")));
        }
        r.take::<2>();
        let learners = u32::from_le_bytes(r.take());
        let mini_batch = u32::from_le_bytes(r.take());
        let learning_rate = f32::from_le_bytes(r.take());
        let epochs = u32::from_le_bytes(r.take());
        let timestamp = u64::from_le_bytes(r.take());
        let applied = u64::from_le_bytes(r.take());
        let dim = u64::from_le_bytes(r.take()) as usize;
        let expected = HEADER_LEN as u64 + learners as u64 * 12 + dim as u64 * 4;
        if body.len() as u64 != expected {
            return Err(ck_err(path, format!("length {} does not match header ({expected})", body.len())));
        }
        let progress = (0..learners)
            .map(|_| LearnerProgress {
                epoch: u32::from_le_bytes(r.take()),
                batch: u64::from_le_bytes(r.take()),
            })
            .collect();
        let weights = (0..dim).map(|_| f32::from_le_bytes(r.take())).collect();
        Ok(Checkpoint {
            learners,
            mini_batch,
            learning_rate,
            epochs,
            timestamp,
            applied,
            progress,
            weights,
        })
    }

    /// Writes to a temporary file next to `path`, then renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            ck_err(path, e.to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| ck_err(path, e.to_string()))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.at..self.at + N].try_into().unwrap();
        self.at += N;
        out
    }
}

/// Captures the PS state and writes it to `path`. On a storage failure the
/// error is returned together with the in-memory record.
pub fn checkpoint_save(
    st: &ServerState,
    sharding: &Sharding,
    epochs: usize,
    path: &Path,
) -> std::result::Result<Checkpoint, (Checkpoint, Error)> {
    let c = Checkpoint::capture(st, sharding, epochs);
    match c.save(path) {
        Ok(()) => Ok(c),
        Err(e) => Err((c, e)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatchdogPolicy {
    pub heartbeat: Duration,
    /// Heartbeats without PS progress before the run is declared failed.
    pub stall_threshold: u32,
    /// Weight updates between checkpoints.
    pub checkpoint_interval: u64,
    /// Longest a push thread may hold its queue guard.
    pub lease_duration: Duration,
    pub max_restarts: u32,
}

impl Default for WatchdogPolicy {
    fn default() -> Self {
        WatchdogPolicy {
            heartbeat: Duration::from_millis(250),
            stall_threshold: 4,
            checkpoint_interval: 1000,
            lease_duration: Duration::from_secs(1),
            max_restarts: 8,
        }
    }
}

impl WatchdogPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.stall_threshold < 2 {
            return Err(Error::Config("stall_threshold must be at least 2".into()));
        }
        if self.heartbeat.is_zero() {
            return Err(Error::Config("heartbeat must be positive".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTrigger {
    /// Milliseconds after supervision started.
    AfterMs(u64),
    /// Fraction of the run's gradients consumed by the PS.
    AtProgress(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Learner(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FaultEvent {
    pub trigger: FaultTrigger,
    pub target: FaultTarget,
    #[serde(serialize_with = "ser_kind")]
    pub kind: KillKind,
}

fn ser_kind<S: serde::Serializer>(k: &KillKind, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(match k {
        KillKind::Soft => "soft",
        KillKind::Hard => "hard",
    })
}

impl FromStr for FaultEvent {
    type Err = String;

    /// `<when> <target> [soft|hard]`, where `when` is `<n>ms` or `<p>%` and
    /// `target` is a learner index or `all`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(format!("expected `<when> <target> [soft|hard]`, got `{s}`"));
        }
        let trigger = if let Some(ms) = parts[0].strip_suffix("ms") {
            FaultTrigger::AfterMs(ms.parse().map_err(|_| format!("bad time `{}`", parts[0]))?)
        } else if let Some(p) = parts[0].strip_suffix('%') {
            let p: f64 = p.parse().map_err(|_| format!("bad progress `{}`", parts[0]))?;
            if !(0.0..=100.0).contains(&p) {
                return Err(format!("progress {p}% out of range"));
            }
            FaultTrigger::AtProgress(p / 100.0)
        } else {
            return Err(format!("`{}` needs an `ms` or `%` suffix", parts[0]));
        };
        let target = match parts[1] {
            "all" | "ALL" => FaultTarget::All,
            l => FaultTarget::Learner(l.parse().map_err(|_| format!("bad learner `{l}`"))?),
        };
        let kind = match parts.get(2).copied() {
            None | Some("soft") => KillKind::Soft,
            Some("hard") => KillKind::Hard,
            Some(k) => return Err(format!("unknown kill kind `{k}`")),
        };
        Ok(FaultEvent { trigger, target, kind })
    }
}

/// One fault per non-empty line; `#` starts a comment.
pub fn parse_schedule(text: &str) -> std::result::Result<Vec<FaultEvent>, String> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let line = line.split('#').next().unwrap().trim();
            (!line.is_empty()).then(|| line.parse().map_err(|e| format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Launch,
    Fault,
    Stall,
    LeaseExpired,
    AllDead,
    NoCheckpoint,
    Restart,
    Complete,
}

/// One line of the watchdog log.
#[derive(Debug, Clone, Serialize)]
pub struct WatchdogEvent {
    pub at_ms: u64,
    pub kind: EventKind,
    /// Launch number, 0 for the first.
    pub launch: u32,
    pub progress: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct SuperviseOptions {
    pub policy: WatchdogPolicy,
    pub faults: Vec<FaultEvent>,
    pub checkpoint_path: Option<PathBuf>,
    /// Line-delimited JSON copy of the watchdog events.
    pub events_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Supervised {
    /// Outcome of the final launch.
    pub outcome: RunOutcome,
    /// Epoch records of every launch, cut back to the checkpoint each
    /// restart resumed from.
    pub records: Vec<EpochRecord>,
    pub restarts: u32,
    pub events: Vec<WatchdogEvent>,
}

impl Supervised {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

struct EventLog {
    started: Instant,
    events: Vec<WatchdogEvent>,
    out: Option<fs::File>,
}

impl EventLog {
    fn push(&mut self, kind: EventKind, launch: u32, progress: u64, detail: String) {
        let e = WatchdogEvent {
            at_ms: self.started.elapsed().as_millis() as u64,
            kind,
            launch,
            progress,
            detail,
        };
        log::info!("watchdog: {:?} launch={} progress={} {}", e.kind, launch, progress, e.detail);
        if let Some(f) = &mut self.out {
            if let Ok(line) = serde_json::to_string(&e) {
                let _ = writeln!(f, "{line}");
            }
        }
        self.events.push(e);
    }
}

enum Verdict {
    Done(Box<RunOutcome>),
    Failed(Vec<EpochRecord>),
}

/// Runs training under the watchdog, injecting `opts.faults`, and restarts
/// the whole run from the last checkpoint whenever it stalls.
pub fn supervise(
    cfg: &EngineConfig,
    provider: Arc<dyn GradientProvider>,
    data: Arc<Dataset>,
    opts: &SuperviseOptions,
) -> Result<Supervised> {
    let policy = &opts.policy;
    policy.validate()?;
    let cfg = cfg.effective();
    let total = cfg.total_gradients(&data).max(1);
    let mut log = EventLog {
        started: Instant::now(),
        events: Vec::new(),
        out: match &opts.events_path {
            Some(p) => Some(fs::File::create(p)?),
            None => None,
        },
    };
    let sink = Arc::new(CheckpointSink::new(policy.checkpoint_interval, opts.checkpoint_path.clone()));
    let mut fired = vec![false; opts.faults.len()];
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut resume: Option<Checkpoint> = None;
    let tick = policy.heartbeat.min(Duration::from_millis(1));

    for launch in 0u32.. {
        // Faults due at time zero take effect before the learners start.
        let mut dead = Vec::new();
        if launch == 0 {
            for (f, done) in opts.faults.iter().zip(fired.iter_mut()) {
                if f.trigger == FaultTrigger::AfterMs(0) && f.kind == KillKind::Soft {
                    *done = true;
                    match f.target {
                        FaultTarget::Learner(l) => dead.push(l),
                        FaultTarget::All => dead.extend(0..cfg.hp.learners),
                    }
                }
            }
        }
        let handle = launch_with_dead(
            &cfg,
            provider.clone(),
            data.clone(),
            resume.as_ref(),
            Some(sink.clone()),
            &dead,
        )?;
        log.push(
            EventKind::Launch,
            launch,
            handle.progress(),
            format!("learners={} killed_at_start={dead:?}", handle.learners()),
        );

        let verdict = watch(&handle, policy, opts, &mut fired, total, tick, launch, &mut log);
        let verdict = match verdict {
            None => match handle.join()? {
                o if o.learners.iter().any(|l| l.status == LearnerStatus::Finished) => Verdict::Done(Box::new(o)),
                o => {
                    log.push(EventKind::AllDead, launch, o.ps.applied, "no learner finished".into());
                    Verdict::Failed(o.records)
                }
            },
            Some(()) => Verdict::Failed(handle.teardown().records),
        };

        let mut launch_records = match verdict {
            Verdict::Done(outcome) => {
                records.extend(outcome.records.iter().cloned());
                log.push(EventKind::Complete, launch, outcome.timestamp, String::new());
                return Ok(Supervised {
                    outcome: *outcome,
                    records,
                    restarts: launch,
                    events: log.events,
                });
            }
            Verdict::Failed(r) => r,
        };

        if launch >= policy.max_restarts {
            return Err(Error::Run(format!("gave up after {launch} restarts")));
        }
        resume = match &opts.checkpoint_path {
            Some(p) => match Checkpoint::load(p) {
                Ok(c) => Some(c),
                Err(e) => {
                    let mem = sink.latest();
                    if mem.is_some() {
                        log::warn!("{e}; using the in-memory checkpoint");
                    }
                    mem
                }
            },
            None => sink.latest(),
        };
        let from = resume.as_ref().map_or(0, |c| c.timestamp);
        if resume.is_none() {
            log.push(
                EventKind::NoCheckpoint,
                launch,
                0,
                "restarting from initial weights".into(),
            );
        }
        launch_records.retain(|r| r.applied <= from);
        records.retain(|r| r.applied <= from);
        records.extend(launch_records);
        log.push(
            EventKind::Restart,
            launch + 1,
            resume.as_ref().map_or(0, |c| c.applied),
            format!("from timestamp {from}"),
        );
    }
    unreachable!()
}

/// Watches one launch. Returns `Some` when the watchdog declared it failed,
/// `None` once the PS exited on its own.
#[allow(clippy::too_many_arguments)]
fn watch(
    h: &RunHandle,
    policy: &WatchdogPolicy,
    opts: &SuperviseOptions,
    fired: &mut [bool],
    total: u64,
    tick: Duration,
    launch: u32,
    log: &mut EventLog,
) -> Option<()> {
    let mut next_beat = Instant::now() + policy.heartbeat;
    let mut last = h.progress();
    let mut idle = 0u32;
    loop {
        thread::sleep(tick);
        let progress = h.progress();
        let elapsed = log.started.elapsed().as_millis() as u64;
        for (f, done) in opts.faults.iter().zip(fired.iter_mut()) {
            if *done {
                continue;
            }
            let due = match f.trigger {
                FaultTrigger::AfterMs(ms) => elapsed >= ms,
                FaultTrigger::AtProgress(p) => progress as f64 >= p * total as f64,
            };
            if due {
                *done = true;
                match f.target {
                    FaultTarget::Learner(l) => h.kill(l, f.kind),
                    FaultTarget::All => (0..h.learners()).for_each(|l| h.kill(l, f.kind)),
                }
                log.push(
                    EventKind::Fault,
                    launch,
                    progress,
                    format!("{:?} kill of {:?}", f.kind, f.target),
                );
            }
        }
        if h.is_finished() {
            return None;
        }
        if let Some((l, held)) = h.longest_guard_hold() {
            if held > policy.lease_duration {
                log.push(
                    EventKind::LeaseExpired,
                    launch,
                    progress,
                    format!("queue[{l}] guard held for {held:?}"),
                );
                return Some(());
            }
        }
        if Instant::now() >= next_beat {
            next_beat += policy.heartbeat;
            if progress == last {
                idle += 1;
                if idle >= policy.stall_threshold {
                    log.push(
                        EventKind::Stall,
                        launch,
                        progress,
                        format!("no progress for {idle} heartbeats"),
                    );
                    return Some(());
                }
            } else {
                idle = 0;
                last = progress;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Each learner independently soft-killed with the kill probability.
    SingleKills,
    /// One learner hard-killed inside its queue's critical section.
    GuardHolder,
    /// Every learner soft-killed at once.
    KillAll,
}

/// Seeded fault schedule. The scenario cycles with the seed; kill points are
/// fractions of the run's progress.
pub fn campaign_schedule(seed: u64, learners: usize, kill_prob: f64) -> (Scenario, Vec<FaultEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b69_6c6c);
    let at = |rng: &mut ChaCha8Rng| FaultTrigger::AtProgress(rng.gen_range(0.05..0.9));
    match seed % 3 {
        0 => {
            let mut faults = Vec::new();
            for l in 0..learners {
                if rng.gen_bool(kill_prob.clamp(0.0, 1.0)) {
                    faults.push(FaultEvent {
                        trigger: at(&mut rng),
                        target: FaultTarget::Learner(l),
                        kind: KillKind::Soft,
                    });
                }
            }
            (Scenario::SingleKills, faults)
        }
        1 => {
            let l = rng.gen_range(0..learners);
            let f = FaultEvent {
                trigger: at(&mut rng),
                target: FaultTarget::Learner(l),
                kind: KillKind::Hard,
            };
            (Scenario::GuardHolder, vec![f])
        }
        _ => {
            let f = FaultEvent {
                trigger: at(&mut rng),
                target: FaultTarget::All,
                kind: KillKind::Soft,
            };
            (Scenario::KillAll, vec![f])
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub engine: EngineConfig,
    pub policy: WatchdogPolicy,
    pub kill_prob: f64,
    /// Largest accepted accuracy gap to the serial baseline.
    pub parity_band: f64,
    /// Checkpoints go here, one file per seed; in memory only when `None`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Fixed schedule for every seed instead of a seeded one.
    pub schedule: Option<Vec<FaultEvent>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CampaignRun {
    pub seed: u64,
    pub scenario: Option<Scenario>,
    pub faults: usize,
    pub completed: bool,
    pub restarts: u32,
    pub accuracy: Option<f64>,
    pub baseline_accuracy: Option<f64>,
    pub parity: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CampaignReport {
    pub runs: Vec<CampaignRun>,
    /// Finished without a restart.
    pub completed: usize,
    /// Finished after at least one restart.
    pub recovered: usize,
    pub failed: usize,
    pub parity_failures: usize,
}

/// Runs one supervised training run per seed, each with its own fault
/// schedule, and compares every final accuracy with serial SGD on the same
/// data and seed.
pub fn run_campaign(
    cfg: &CampaignConfig,
    provider: Arc<dyn GradientProvider>,
    data: Arc<Dataset>,
    seeds: Range<u64>,
) -> Result<CampaignReport> {
    let mut report = CampaignReport::default();
    for seed in seeds {
        let mut engine = cfg.engine.clone();
        engine.seed = seed;
        let (scenario, faults) = match &cfg.schedule {
            Some(s) => (None, s.clone()),
            None => {
                let (sc, f) = campaign_schedule(seed, engine.effective().hp.learners, cfg.kill_prob);
                (Some(sc), f)
            }
        };
        let baseline = sgd_oracle(provider.as_ref(), &data, &engine.hp, seed)?;
        let (_, baseline_accuracy) = evaluate(provider.as_ref(), &baseline.snapshot(), &data);
        let opts = SuperviseOptions {
            policy: cfg.policy.clone(),
            faults: faults.clone(),
            checkpoint_path: cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("seed-{seed}.ckpt"))),
            events_path: None,
        };
        let mut run = CampaignRun {
            seed,
            scenario,
            faults: faults.len(),
            completed: false,
            restarts: 0,
            accuracy: None,
            baseline_accuracy,
            parity: false,
            error: None,
        };
        match supervise(&engine, provider.clone(), data.clone(), &opts) {
            Ok(s) => {
                run.completed = true;
                run.restarts = s.restarts;
                run.accuracy = s.outcome.final_accuracy;
                run.parity = match (run.accuracy, baseline_accuracy) {
                    (Some(a), Some(b)) => (a - b).abs() <= cfg.parity_band,
                    _ => s.outcome.final_loss.is_finite(),
                };
                if s.restarts == 0 {
                    report.completed += 1;
                } else {
                    report.recovered += 1;
                }
                if !run.parity {
                    report.parity_failures += 1;
                }
            }
            Err(e) => {
                run.error = Some(e.to_string());
                report.failed += 1;
            }
        }
        if let Some(p) = &opts.checkpoint_path {
            let _ = fs::remove_file(p);
        }
        report.runs.push(run);
    }
    Ok(report)
}
